"""Two-frame patch extraction, matching-pursuit encoding, and online dictionary learning.

All patches of a frame pair share one dictionary. Encoding is greedy matching
pursuit: repeatedly select the atom with the largest absolute inner product
with the residual (ties break to the lowest index) and subtract its projection.
A patch's code holds at most `kmax` distinct atoms; re-selecting an atom
accumulates into its existing coefficient.

Dictionary atoms are stored in float32 (the checkpoint payload format) but all
arithmetic runs in float64 against a unit-renormalized view, which keeps the
per-step energy identity ||r_before||^2 = ||r_after||^2 + c^2 tight to ~1e-14.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import sparse

from .imagery import FramePair

__all__ = [
    "ZERO_NORM_TOL",
    "Dictionary",
    "PatchBatch",
    "SparseCode",
    "init_dictionary",
    "extract_patches",
    "matching_pursuit",
    "encode_batch",
    "error_from_codes",
    "reconstruction_error",
    "update_dictionary",
]

ZERO_NORM_TOL = 1e-8  # patches below this norm carry no signal and are skipped
_ITER_CAP_PER_ATOM = 10  # hard bound on re-selection loops, never hit in practice


@dataclass(frozen=True, eq=False)
class Dictionary:
    """An overcomplete set of unit-norm spatio-temporal atoms."""

    atoms: np.ndarray  # (n_atoms, dim)
    generation: int = 0
    _f64: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        a = np.ascontiguousarray(self.atoms)
        a.flags.writeable = False
        object.__setattr__(self, "atoms", a)

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return self.generation == other.generation and np.array_equal(
            self.atoms, other.atoms
        )

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def check_unit_norm(self, tol: float = 1e-6) -> None:
        a = self.atoms.astype(np.float64, copy=False)
        norms = np.sqrt(np.einsum("ij,ij->i", a, a))
        worst = float(np.abs(norms - 1.0).max())
        if worst > tol:
            raise ValueError(
                f"dictionary atoms must be unit norm (worst deviation {worst:.3g})"
            )

    def atoms_f64(self) -> np.ndarray:
        """Float64 view of the atoms, re-normalized to machine-precision unit norm."""
        if self._f64 is None:
            a = self.atoms.astype(np.float64)
            a /= np.sqrt(np.einsum("ij,ij->i", a, a))[:, None]
            a.flags.writeable = False
            object.__setattr__(self, "_f64", a)
        return self._f64


def init_dictionary(
    n_atoms: int, dim: int, rng: np.random.Generator, dtype=np.float32
) -> Dictionary:
    """Random unit-norm atoms: isotropic standard normal, then normalized."""
    atoms = rng.standard_normal((n_atoms, dim))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    return Dictionary(atoms=atoms.astype(dtype), generation=0)


@dataclass(frozen=True, eq=False)
class PatchBatch:
    """Flattened two-frame patches (previous-frame half first), DC-removed per half."""

    vectors: np.ndarray  # (P, 2 * patch_px^2) float64
    norms: np.ndarray  # (P,) Euclidean norms of `vectors`

    def __post_init__(self):
        for name in ("vectors", "norms"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]


def extract_patches(frames: FramePair, patch_px: int = 10, stride: int = 5) -> PatchBatch:
    """Cut the frame pair into an overlapping patch grid.

    Patches tile the fovea with top-left corners at multiples of `stride`;
    each patch stacks the previous-frame block before the current-frame block
    and has the mean of each frame half subtracted.
    """
    size = frames.previous.size
    if (size - patch_px) % stride != 0:
        raise ValueError(
            f"fovea size {size} does not tile with {patch_px}px patches at stride {stride}"
        )
    grid = (size - patch_px) // stride + 1
    halves = []
    for frame in (frames.previous.values, frames.current.values):
        win = np.lib.stride_tricks.sliding_window_view(frame, (patch_px, patch_px))
        win = win[::stride, ::stride].reshape(grid * grid, patch_px * patch_px)
        halves.append(win - win.mean(axis=1, keepdims=True))
    vectors = np.concatenate(halves, axis=1)
    return PatchBatch(vectors=vectors, norms=np.linalg.norm(vectors, axis=1))


@dataclass(frozen=True, eq=False)
class SparseCode:
    """Batch of matching-pursuit codes: up to kmax (atom, coefficient) entries per patch."""

    indices: np.ndarray  # (P, kmax) int32, -1 where unused
    coeffs: np.ndarray  # (P, kmax) float64
    residual_sq: np.ndarray  # (P,) final residual energy per patch
    initial_sq: np.ndarray  # (P,) input energy per patch
    max_energy_violation: float  # worst relative defect of the per-step energy identity
    reselect_count: int  # how many selections re-used an already-selected atom

    def entries(self, i: int) -> list[tuple[int, float]]:
        row = self.indices[i]
        used = row >= 0
        return list(zip(row[used].tolist(), self.coeffs[i][used].tolist()))

    @property
    def count(self) -> int:
        return self.indices.shape[0]


def matching_pursuit(
    x: np.ndarray, dictionary: Dictionary, kmax: int = 10, tol: float = 0.0
) -> list[tuple[int, float]]:
    """Greedy sparse code of a single vector; returns (atom, coefficient) pairs.

    Stops when `kmax` distinct atoms are in use, when the residual norm falls
    to `tol` times the input norm, or when the residual is orthogonal to every
    atom.
    """
    dictionary.check_unit_norm()
    x = np.asarray(x, dtype=np.float64)
    atoms = dictionary.atoms_f64()
    norm = float(np.linalg.norm(x))
    if norm <= ZERO_NORM_TOL:
        return []
    residual = x.copy()
    stop_sq = (tol * norm) ** 2
    chosen: dict[int, float] = {}
    for _ in range(_ITER_CAP_PER_ATOM * kmax):
        ips = atoms @ residual
        n = int(np.argmax(np.abs(ips)))
        c = float(ips[n])
        if c == 0.0:
            break
        residual -= c * atoms[n]
        chosen[n] = chosen.get(n, 0.0) + c
        if len(chosen) >= kmax or float(residual @ residual) <= stop_sq:
            break
    return list(chosen.items())


@numba.njit(cache=True)
def _mp_iterate(X, atoms, atoms_t, kmax, stop_sq, alive, indices, coeffs, res_sq, iter_cap):
    """Fused matching-pursuit loop over all rows. Selection uses a BLAS matrix
    product; the per-row argmax takes the first (lowest-index) maximum."""
    P, d = X.shape
    n_atoms = atoms.shape[0]
    R = X.copy()
    counts = np.zeros(P, dtype=np.int64)
    max_viol = 0.0
    reselects = 0
    for _ in range(iter_cap):
        any_alive = False
        for i in range(P):
            if alive[i]:
                any_alive = True
                break
        if not any_alive:
            break
        ips = np.dot(R, atoms_t)
        for i in range(P):
            if not alive[i]:
                continue
            best = 0
            best_abs = -1.0
            for n in range(n_atoms):
                v = abs(ips[i, n])
                if v > best_abs:
                    best_abs = v
                    best = n
            c = ips[i, best]
            if c == 0.0:
                alive[i] = False
                continue
            before = res_sq[i]
            after = 0.0
            for j in range(d):
                R[i, j] -= c * atoms[best, j]
                after += R[i, j] * R[i, j]
            denom = before if before > 1e-300 else 1e-300
            viol = abs(before - after - c * c) / denom
            if viol > max_viol:
                max_viol = viol
            res_sq[i] = after
            slot = -1
            for k in range(kmax):
                if indices[i, k] == best:
                    slot = k
                    reselects += 1
                    break
                if indices[i, k] < 0:
                    break
            if slot < 0:
                slot = counts[i]
                indices[i, slot] = best
                counts[i] += 1
            coeffs[i, slot] += c
            if counts[i] >= kmax or res_sq[i] <= stop_sq[i]:
                alive[i] = False
    return max_viol, reselects


def encode_batch(
    batch: PatchBatch, dictionary: Dictionary, kmax: int = 10, tol: float = 0.0
) -> SparseCode:
    """Matching pursuit over a whole patch batch against one dictionary snapshot.

    Semantics match `matching_pursuit` patch-by-patch; the batch form exists so
    the inner products run as one matrix product per iteration and the per-row
    bookkeeping stays in one compiled loop.
    """
    dictionary.check_unit_norm()
    atoms = dictionary.atoms_f64()
    atoms_t = atoms.T.copy()
    X = batch.vectors
    P = batch.count
    norms = batch.norms
    indices = np.full((P, kmax), -1, dtype=np.int32)
    coeffs = np.zeros((P, kmax), dtype=np.float64)
    initial_sq = norms * norms
    res_sq = initial_sq.copy()
    stop_sq = (tol * norms) ** 2
    alive = norms > ZERO_NORM_TOL
    max_viol, reselects = _mp_iterate(
        X, atoms, atoms_t, kmax, stop_sq, alive, indices, coeffs, res_sq,
        _ITER_CAP_PER_ATOM * kmax,
    )
    return SparseCode(
        indices=indices,
        coeffs=coeffs,
        residual_sq=res_sq,
        initial_sq=initial_sq,
        max_energy_violation=float(max_viol),
        reselect_count=int(reselects),
    )


def error_from_codes(codes: SparseCode) -> float:
    """Reconstruction error from the encoder's maintained residual energies.

    Identical (to rounding) to `reconstruction_error` on the same inputs, but
    free: encode_batch already tracked every residual. The training loop uses
    this form each frame.
    """
    mask = codes.initial_sq > ZERO_NORM_TOL**2
    if not mask.any():
        return 0.0
    return float(np.mean(codes.residual_sq[mask] / codes.initial_sq[mask]))


def _code_matrix(codes: SparseCode, n_atoms: int) -> sparse.csr_matrix:
    """The (P, n_atoms) coefficient matrix as CSR; unused slots become zeros."""
    P, kmax = codes.indices.shape
    idx = codes.indices.ravel()
    valid = idx >= 0
    data = np.where(valid, codes.coeffs.ravel(), 0.0)
    cols = np.where(valid, idx, 0)
    indptr = np.arange(0, P * kmax + 1, kmax)
    return sparse.csr_matrix((data, cols, indptr), shape=(P, n_atoms))


def _reconstruct(codes: SparseCode, atoms: np.ndarray) -> np.ndarray:
    """Dense reconstructions: x_hat_i = sum_n a_in * atom_n."""
    return _code_matrix(codes, atoms.shape[0]) @ atoms


def reconstruction_error(
    batch: PatchBatch, codes: SparseCode, dictionary: Dictionary
) -> float:
    """Mean normalized squared reconstruction error over the informative patches.

    Patches with norm below ZERO_NORM_TOL are excluded from both numerator and
    denominator count; an all-blank batch scores 0.
    """
    mask = batch.norms > ZERO_NORM_TOL
    if not mask.any():
        return 0.0
    xhat = _reconstruct(codes, dictionary.atoms_f64())
    resid = batch.vectors[mask] - xhat[mask]
    num = np.einsum("ij,ij->i", resid, resid)
    return float(np.mean(num / (batch.norms[mask] ** 2)))


def update_dictionary(
    dictionary: Dictionary, batch: PatchBatch, codes: SparseCode, lr: float
) -> Dictionary:
    """One online gradient step on the summed squared residual, pooled over patches.

    atom_n += lr/P * sum_i a_in (x_i - x_hat_i), then each touched atom is
    re-normalized to unit norm. Atoms not selected in this batch keep their
    stored values bit-for-bit.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    atoms64 = dictionary.atoms_f64()
    P, kmax = codes.indices.shape
    if lr == 0.0:
        return Dictionary(atoms=dictionary.atoms.copy(), generation=dictionary.generation + 1)

    A = _code_matrix(codes, dictionary.n_atoms)
    resid = batch.vectors - A @ atoms64
    grad = np.asarray((A.T @ resid))
    flat = codes.indices.ravel()
    touched = np.zeros(dictionary.n_atoms, dtype=bool)
    touched[flat[flat >= 0]] = True

    new_atoms = np.array(dictionary.atoms, copy=True)
    if touched.any():
        stepped = atoms64[touched] + (lr / P) * grad[touched]
        norms = np.linalg.norm(stepped, axis=1, keepdims=True)
        ok = norms[:, 0] > 1e-12  # a collapsed atom keeps its previous value
        stepped[ok] = stepped[ok] / norms[ok]
        out = new_atoms[touched]
        out[ok] = stepped[ok].astype(new_atoms.dtype)
        new_atoms[touched] = out
    return Dictionary(atoms=new_atoms, generation=dictionary.generation + 1)
