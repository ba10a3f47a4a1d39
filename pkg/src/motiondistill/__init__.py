"""Motion distillation for canonical Gaussian scenes.

A HexPlane motion field warps a static set of 3-D Gaussians over time; the
field is optimized by distilling the score difference between a motion-
conditioned toy video denoiser and its static counterpart, with DDIM-inverted
noise, rigidity and trajectory smoothness penalties, and an SDEdit-style
refinement pass.
"""

__version__ = "0.1.0"
