"""How the fusion variants and the alignment loss behave on random embeddings.

Run:  python demos/02_fusion_and_alignment.py
"""

import numpy as np

from xview.model import (AlignConfig, FusionConfig, ModelConfig, init_params, k_lea, mcfuse,
                         xobjalign_loss)
from xview.tensor import Tensor

rng = np.random.default_rng(0)
D, N = 32, 4
params = init_params(ModelConfig(dim=D), seed=0)
e_txt = Tensor(rng.normal(size=(1, D)))
e_vis = Tensor(rng.normal(size=(N, D)))

# the learnable residual weight starts at sigmoid(alpha) = 0.8
print(f"initial k_lea = {k_lea(params):.3f}")

for variant, k in [("learnable_residual", 0.0), ("fixed_k", 1.0), ("fixed_k", 0.0),
                   ("fixed_k", 0.5), ("ca_plain", 0.0), ("add", 0.0), ("ca_no_params", 0.0)]:
    e_cond, ca = mcfuse(e_txt, e_vis, params, FusionConfig(variant, k))
    dist_vis = np.linalg.norm(e_cond.data - e_vis.data)
    label = f"{variant}({k:g})" if variant == "fixed_k" else variant
    print(f"{label:20s} |e_cond - e_vis| = {dist_vis:9.3f}")

# the residual weight interpolates exactly between the two endpoints
out, ca = mcfuse(e_txt, e_vis, params, FusionConfig("fixed_k", 0.3))
gap = out.data - (0.3 * e_vis.data + 0.7 * ca.data)
print("max |e_cond - (k e_vis + (1-k) CA)| =", np.abs(gap).max())

# alignment loss: mean row-wise distance; cosine ignores scale
a = Tensor([[0.0, 3.0]])
b = Tensor([[4.0, 0.0]])
print("euclidean([0,3], [4,0]) =", xobjalign_loss(a, b, AlignConfig("euclidean")).item())
u = Tensor(rng.normal(size=(N, D)))
print("cosine(u, 2u)           =", xobjalign_loss(u, Tensor(2 * u.data), AlignConfig("cosine")).item())
print("cosine(u, -u)           =", xobjalign_loss(u, Tensor(-u.data), AlignConfig("cosine")).item())
