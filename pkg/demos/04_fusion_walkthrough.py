"""
Local loss fusion, step by step
===============================

The small client takes the frozen federated model, feeds its common columns
through it to get embeddings, puts a one-layer prune net on top, and trains
its own main net on ALL of its columns while adding beta * prune-loss to the
objective. beta is learnable with a plain sgd step, and since the prune loss
is nonnegative, beta can only decay: the client gradually tunes down how
much the federated signal matters.

The punchline worth seeing once: the two loss terms touch disjoint
parameters, so the main net's trajectory is exactly the localized baseline's
trajectory under the same seed. Fusion changes what is reported alongside
(the prune head and beta), not where the main net goes.
"""

from fedfusion.data import SyntheticSpec, encode, generate_synthetic, numeric_stats, stratified_split
from fedfusion.evaluation import auroc
from fedfusion.federated import FedClient, FedConfig, encode_params, run_federated
from fedfusion.fusion import (
    FusionConfig,
    baseline_localized,
    fusion_train,
    group_features,
    init_fusion_state,
    predict_fused,
    select_feature_columns,
)
from fedfusion.nn import TrainConfig, class_balanced_weights, predict_probs

small, large = generate_synthetic(SyntheticSpec(seed=2024))
grouping = group_features({"small": small.schema, "large": large.schema})
print("global features:", grouping.global_features)
print("small unique features:", grouping.unique_features["small"])

train_small, test_small = stratified_split(small, 0.7, seed=1)
train_large, _ = stratified_split(large, 0.7, seed=2)

# stage 1: federated model on the common columns
stats = numeric_stats(train_small)
enc_train = encode(train_small, stats)
enc_test = encode(test_small, stats)
weights = class_balanced_weights(train_small.class_counts(), 0.999)

fed_clients = []
for cid, ds in (("small", train_small), ("large", train_large)):
    st = numeric_stats(ds)
    mat = encode(ds, st)
    xg, labels = select_feature_columns(mat, grouping.global_features)
    fed_clients.append(
        FedClient(cid, xg, ds.labels, class_balanced_weights(ds.class_counts(), 0.999), labels)
    )
fed_cfg = FedConfig(rounds=3, local_epochs=2, train=TrainConfig(rng_seed=5),
                    expected_clients=2, hidden_dims=(64, 32))
global_model, _ = run_federated(fed_clients, fed_cfg)
frozen = encode_params(global_model)

# stage 2: fused local training on all columns
cfg = FusionConfig(train=TrainConfig(epochs=10, rng_seed=7), beta0=1.0, beta_lr=0.05)
state = init_fusion_state(global_model, enc_train.x.shape[1], cfg)
xg_train, _ = select_feature_columns(enc_train, grouping.global_features)
state, trace = fusion_train(state, enc_train.x, xg_train, train_small.labels, weights, cfg)

print("\nepoch   l_main   l_prune   beta")
for i, entry in enumerate(trace):
    print(f"{i:>5}   {entry['l_main']:.4f}   {entry['l_prune']:.4f}   {entry['beta']:.4f}")

print("\nglobal model still frozen:", encode_params(state.global_model) == frozen)

probs = predict_fused(state, enc_test.x)
print(f"fused test AUROC: {auroc(probs, test_small.labels):.4f}")

ref, _ = baseline_localized(enc_train.x, train_small.labels, weights, cfg.train,
                            cfg.main_hidden_dims)
print("main net == localized baseline:", encode_params(state.main_net) == encode_params(ref))
print(f"localized test AUROC: {auroc(predict_probs(ref, enc_test.x), test_small.labels):.4f}")
