"""
Training a small model end to end
=================================

A reduced configuration trains in a few seconds and shows the loop:
per-epoch training loss, validation metrics, and best-checkpoint selection.
"""

import numpy as np

from gemgaze.pipeline import GEMModel, TrainConfig, evaluate, fit, make_split

cfg = TrainConfig(
    image_size=64, stage_channels=(4, 8, 8, 8), c1=16, c2=8, c3=8,
    text_dim=16, fusion_width=8, model_dim=16, node_dim=16,
    epochs=3, n_train=96, n_val=32,
)
train = make_split(cfg, "train", cfg.n_train)
val = make_split(cfg, "val", cfg.n_val)

model = GEMModel(cfg)
print("parameters:", model.params.size())


def show(rec):
    print(f"epoch {rec['epoch']}: loss {rec['train_loss']:.4f}  val mse {rec['mse']:.4f}  pck@0.2 {rec['pck02']:.1f}")


best_state, records = fit(model, train, val, show)

# reload the best epoch and score the held-out split
model.params.load_state(best_state)
print(evaluate(model, make_split(cfg, "test", 32)))

# the text-blind switch zeroes the query features
blind = GEMModel(TrainConfig(**{**cfg.to_dict(), "text_blind": True}))
print("blind model, untrained:", np.round(blind.predict(train[0].image[None, None], train[0].tokens[None])[0, 0], 3))
