"""
Federated training on the shared columns
========================================

Two clients train one global model on their six common columns with
round-based FedAvg. The same session is then replayed over a real TCP
loopback socket pair; the byte-encoded final models must be identical,
because the transport carries exact float64 payloads and the aggregation
order is fixed.
"""

import numpy as np

from fedfusion.data import SyntheticSpec, generate_synthetic
from fedfusion.federated import FedClient, FedConfig, encode_params, run_federated
from fedfusion.nn import TrainConfig, class_balanced_weights

COMMON = [f"c{j:02d}" for j in range(6)]


def make_clients():
    small, large = generate_synthetic(SyntheticSpec(n_small=500, n_large=2000, seed=42))
    clients = []
    for cid, ds in (("small", small), ("large", large)):
        x = np.array([[float(v) for v in row[:6]] for row in ds.rows])
        weights = class_balanced_weights(ds.class_counts(), 0.999)
        clients.append(FedClient(cid, x, ds.labels, weights, COMMON))
    return clients


cfg = FedConfig(
    rounds=4,
    local_epochs=2,
    train=TrainConfig(learning_rate=1e-3, batch_size=64, rng_seed=11),
    expected_clients=2,
    hidden_dims=(16, 8),
)

model, history = run_federated(make_clients(), cfg, transport="inproc")
for rnd, losses in enumerate(history):
    parts = "  ".join(f"{cid}: {loss:.4f}" for cid, loss in sorted(losses.items()))
    print(f"round {rnd}  {parts}")

blob = encode_params(model)
print(f"\nencoded global model: {len(blob)} bytes")

# replay over TCP loopback — fresh clients, same seeds
model_tcp, _ = run_federated(make_clients(), cfg, transport="tcp")
print("tcp replay bitwise-identical:", encode_params(model_tcp) == blob)
