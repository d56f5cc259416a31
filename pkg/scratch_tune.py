"""Scratch calibration for the overfit and exo-benefit acceptance runs."""
import time

import numpy as np

from exoforecast.data import SynthConfig, mask_exogenous, prepare_splits, synth_generate
from exoforecast.model import ExoModel, ModelConfig
from exoforecast.training import TrainConfig, evaluate, metrics, stack_samples, train


def build(prepared, backbone="mlp-mixer", hidden=8, experts=2, seed=1,
          use_selector=True):
    cfg = ModelConfig(
        n_nodes=prepared.train_panel.n_nodes,
        past_exo_dim=len(prepared.layout.past),
        future_exo_dim=len(prepared.layout.future),
        t_past=prepared.t_past, t_future=prepared.t_future,
        hidden=hidden, experts=experts, backbone=backbone, mix_hidden=16,
        graph_kind="pearson", graph_k=3, keep_prob=1.0, seed=seed,
        use_selector=use_selector)
    return ExoModel(cfg, target_series=prepared.train_target_series)


def overfit_probe(backbone, epochs=200):
    synth = SynthConfig(nodes=4, steps=512, lag=5, noise=0.0, seed=11)
    panel = synth_generate(synth)
    target_std = panel.data[:, :, panel.target_index].std()
    prepared = prepare_splits(panel, t_past=8, t_future=4)
    model = build(prepared, backbone=backbone)
    t0 = time.time()
    cfg = TrainConfig(epochs=epochs, batch_size=512, seed=0, patience=epochs)
    result = train(model, prepared.train, prepared.train, prepared.scaler,
                   prepared.target_channel, cfg)
    wall = time.time() - t0
    x, ep, ef, y = stack_samples(prepared.train)
    pred = model.predict(x, ep, ef)
    mae = metrics(prepared.scaler.inverse_channel(y, prepared.target_channel),
                  prepared.scaler.inverse_channel(pred, prepared.target_channel)).mae
    print(f"[overfit {backbone}] epochs={len(result.history)} wall={wall:.1f}s "
          f"train MAE={mae:.4f} target std={target_std:.4f} "
          f"ratio={mae / target_std:.4f}")


def benefit_probe(a, b, seeds=(0, 1, 2, 3, 4), epochs=80):
    full_maes, bare_maes = [], []
    t0 = time.time()
    for seed in seeds:
        synth = SynthConfig(nodes=4, steps=512, lag=5, noise=0.1, seed=100 + seed,
                            past_coef=a, future_coef=b)
        panel = synth_generate(synth)
        prepared = prepare_splits(panel, t_past=8, t_future=4)
        cfg = TrainConfig(epochs=epochs, batch_size=512, seed=seed, patience=epochs)

        model = build(prepared, seed=seed)
        train(model, prepared.train, prepared.val, prepared.scaler,
              prepared.target_channel, cfg)
        full = evaluate(model, prepared.test, prepared.scaler,
                        prepared.target_channel).mae

        bare_prep = prepare_splits(panel, t_past=8, t_future=4)
        for name in ("train", "val", "test"):
            setattr(bare_prep, name,
                    mask_exogenous(getattr(bare_prep, name), bare_prep.layout,
                                   use_past=False, use_future=False, use_date=True))
        bare = build(bare_prep, seed=seed, use_selector=False)
        train(bare, bare_prep.train, bare_prep.val, bare_prep.scaler,
              bare_prep.target_channel, cfg)
        bare_mae = evaluate(bare, bare_prep.test, bare_prep.scaler,
                            bare_prep.target_channel).mae
        full_maes.append(full)
        bare_maes.append(bare_mae)
        print(f"  seed {seed}: full={full:.4f} bare={bare_mae:.4f}")
    med_full = float(np.median(full_maes))
    med_bare = float(np.median(bare_maes))
    gain = (med_bare - med_full) / med_bare
    print(f"[benefit a={a} b={b}] median full={med_full:.4f} bare={med_bare:.4f} "
          f"gain={gain * 100:.1f}%  wall={time.time() - t0:.1f}s")


if __name__ == "__main__":
    overfit_probe("mlp-mixer")
    overfit_probe("grugcn")
    benefit_probe(1.2, 1.2)
    benefit_probe(0.0, 0.0)
