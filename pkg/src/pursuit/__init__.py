"""pursuit: co-development of visual motion coding and smooth-pursuit gaze control.

A desk-scale simulator in which a sparse-coding front end (matching pursuit
over two-frame image patches, online dictionary learning) and an actor-critic
gaze controller evolve together, both driven by the same signal: the fidelity
of the sparse reconstruction of the foveal input. Includes the full analysis
battery (slip-grid policy evaluation, Gabor fits of learned atoms, grating
tuning curves, preference histograms).
"""

__version__ = "0.1.0"
