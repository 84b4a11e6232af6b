"""
Soft graph matching with affinity, normalization and Sinkhorn
=============================================================

"""

import numpy as np

from gemgaze import tensorcore as tc
from gemgaze.matcher import affinity_matrix, correspondence_loss, positive_normalize, sinkhorn

rng = np.random.default_rng(3)
k, d = 6, 16

# Node embeddings for a reference graph, and a shuffled noisy copy of it.
nt = rng.normal(size=(k, d))
perm = rng.permutation(k)
ns = nt[perm] + 0.05 * rng.normal(size=(k, d))

# identity affinity: plain inner products between the two node sets
m = affinity_matrix(tc.Tensor(nt), tc.Tensor(ns), tc.Tensor(np.eye(d)))
c = sinkhorn(positive_normalize(m), iters=20)

print("row sums   ", np.round(c.data.sum(axis=1), 6))
print("column sums", np.round(c.data.sum(axis=0), 6))

# row i of the correspondence should peak at the column holding node i
recovered = c.data.argmax(axis=1)
print("recovered  ", recovered)
print("expected   ", np.argsort(perm))

# the training signal rewards mass on the diagonal
aligned = sinkhorn(positive_normalize(affinity_matrix(tc.Tensor(nt), tc.Tensor(nt), tc.Tensor(np.eye(d)))))
print("CE aligned ", correspondence_loss(aligned).item())
print("CE shuffled", correspondence_loss(c).item())
