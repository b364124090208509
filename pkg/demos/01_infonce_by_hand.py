# InfoNCE on a handful of vectors, next to the same number computed by hand.
import numpy as np

from tactile_moco import objectives as O
from tactile_moco.tensor import Tensor

rng = np.random.default_rng(0)
unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)

# two queries, their positive keys, and a queue of 4 negatives (all unit rows)
q = unit(rng.standard_normal((2, 8)))
k_pos = unit(q + 0.3 * rng.standard_normal((2, 8)))  # positives sit near their query
queue = O.DictionaryQueue(capacity=4, dim=8, dtype=np.float64)
queue.enqueue(unit(rng.standard_normal((4, 8))))
tau = 0.07

q_t = Tensor(q, requires_grad=True, dtype=np.float64)
loss = O.infonce_loss(q_t, k_pos, queue, tau)
print("engine loss", loss.item())

# by hand: logits are [q.k+, q.k_1 .. q.k_K] / tau, loss is -log softmax[0], averaged
logits = np.concatenate([(q * k_pos).sum(1, keepdims=True), q @ queue.keys().T], axis=1) / tau
manual = np.mean(np.log(np.exp(logits).sum(1)) - logits[:, 0])
print("manual loss", manual)

# the gradient only reaches q; keys and the queue are constants
loss.backward()
print("grad wrt q, row norms", np.linalg.norm(q_t.grad, axis=1))

# all-equal similarities: loss is ln(K+1) whatever the vectors are
same = np.tile(unit(np.ones(8)), (2, 1))
flat = O.infonce_with_negatives(Tensor(same, dtype=np.float64), same, np.tile(same[:1], (4, 1)), tau)
print("uniform logits", flat.item(), "ln(5) =", np.log(5))
