"""Exploratory run for the collapse criterion: 500 desk steps with and
without Sinkhorn + me-max, tracking mean-prediction entropy."""

import sys
import time

import numpy as np

from loca import datagen, evaluate, trainer
from loca.config import parse_config


def run(sk, memax, steps=500, corpus_size=128):
    train_n = corpus_size // 2
    cfg = parse_config(flags={
        "corpus_size": corpus_size,
        "epochs": int((steps * cfg_batch + train_n - 1) // train_n) if False else 999,
        "sinkhorn_enabled": sk,
        "lambda_memax": 1.0 if memax else 0.0,
    })
    per_epoch = train_n // cfg.batch_size
    epochs = (steps + per_epoch - 1) // per_epoch
    cfg = parse_config(flags={
        "corpus_size": corpus_size, "epochs": int(epochs),
        "sinkhorn_enabled": sk, "lambda_memax": 1.0 if memax else 0.0,
    })
    corpus = datagen.build_corpus(corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train, held = datagen.split_by_parity(corpus)
    pairs = evaluate.make_eval_pairs(
        [im.pixels for im in held], 100, cfg.vit_config(), cfg.augment_config(),
        cfg.eta, cfg.structured_mask, seed=cfg.seed,
    )
    entropies = []

    def emit(rec):
        if rec["step"] % 100 == 0 and not rec["skipped"]:
            entropies.append((rec["step"], rec["entropy"]))

    t0 = time.time()
    state = trainer.run_pretraining(
        cfg.train_config(), cfg.vit_config(), cfg.augment_config(),
        [im.pixels for im in train], out_dir=None, emit=emit, max_steps=steps,
    )
    h = evaluate.mean_prediction_entropy(trainer.eval_params(state), pairs, cfg.tau_student)
    lnk = np.log(cfg.num_prototypes)
    print(f"SK={sk} memax={memax}: final heldout H={h:.3f} (lnK={lnk:.3f}, 0.8lnK={0.8*lnk:.3f}) "
          f"elapsed={time.time()-t0:.0f}s")
    print("   train-batch entropy trace:", [(s, round(e, 3)) for s, e in entropies])
    return h


cfg_batch = 8

if __name__ == "__main__":
    mode = sys.argv[1] if len(sys.argv) > 1 else "both"
    if mode in ("both", "off"):
        run(False, False)
    if mode in ("both", "on"):
        run(True, True)
