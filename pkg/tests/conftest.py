import numpy as np

from motiondistill import diffusion as df


def small_model(seed=2, live_output=True):
    """8x8 test denoiser; output conv randomized so gradients reach every layer.

    The output conv starts at zero by design, which silences the network (and
    every upstream gradient) until training moves it.
    """
    m = df.Denoiser(df.DenoiserSpec(height=8, width=8, channels=6, emb_dim=8, seed=seed))
    if live_output:
        rng = np.random.default_rng(seed + 100)
        m.store["base.conv3_w"].data[:] = rng.normal(0, 0.2, (3, 3, 6, 1))
    return m
