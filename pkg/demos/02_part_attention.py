# Part attention: once sampling locations are fixed, the attention weights
# depend only on what was sampled, not on the query.  Deformable attention
# predicts its weights from the query, so they move with it.
import numpy as np

from pstr import numerics as nx
from pstr.attention import AttentionConfig, DeformableAttention, PartAttentionLayer, ReferencePoint
from pstr.numerics import Tensor

nx.set_default_dtype(np.float64)
rng = np.random.default_rng(1)
cfg = AttentionConfig(d_model=16, n_heads=2, n_points=4)

fmap = Tensor(rng.normal(size=(1, 8, 8, 16)))
ref = ReferencePoint(np.array([[[0.5, 0.5]]]), np.array([[[0.3, 0.6]]]))
q1 = Tensor(rng.normal(size=(1, 1, 16)))
q2 = Tensor(rng.normal(size=(1, 1, 16)))

part = PartAttentionLayer(rng, cfg)
for p in part.parameters():
    p.data = p.data + rng.normal(0, 0.3, size=p.shape)
_, a = part(q1, ref, fmap, return_aux=True)
_, b = part(q2, ref, fmap, locations=a["locations"], return_aux=True)
print("part attention weights, query 1\n", np.round(a["weights"].reshape(-1, 4), 4))
print("same locations, query 2\n", np.round(b["weights"].reshape(-1, 4), 4))
print("identical:", np.array_equal(a["weights"], b["weights"]))

deform = DeformableAttention(rng, cfg)
for p in deform.parameters():
    p.data = p.data + rng.normal(0, 0.3, size=p.shape)
_, a = deform(q1, ref, fmap, return_aux=True)
_, b = deform(q2, ref, fmap, return_aux=True)
print("deformable weights, query 1\n", np.round(a["weights"].reshape(-1, 4), 4))
print("deformable weights, query 2\n", np.round(b["weights"].reshape(-1, 4), 4))
print("identical:", np.array_equal(a["weights"], b["weights"]))
