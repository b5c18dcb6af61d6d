"""Exploratory run for the learning-signal criterion: 2000 desk steps at
eta=0.8 and eta=1.0 on a 512-image corpus, tracking held-out accuracy."""

import json
import sys
import time

import numpy as np

from loca import datagen, evaluate, trainer
from loca.config import parse_config


def run(eta, steps=2000, corpus_size=512, eval_every=250):
    cfg = parse_config(flags={
        "corpus_size": corpus_size, "epochs": 999, "eta": eta,
    })
    # enough epochs to cover the requested steps; schedule spans them
    train_n = corpus_size // 2
    per_epoch = train_n // cfg.batch_size
    epochs = (steps + per_epoch - 1) // per_epoch
    cfg = parse_config(flags={"corpus_size": corpus_size, "epochs": int(epochs), "eta": eta})

    corpus = datagen.build_corpus(corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train, held = datagen.split_by_parity(corpus)
    train_px = [im.pixels for im in train]
    held_px = [im.pixels for im in held]
    pairs = evaluate.make_eval_pairs(
        held_px, 200, cfg.vit_config(), cfg.augment_config(), eta, cfg.structured_mask, seed=cfg.seed
    )

    t0 = time.time()
    state = None
    log = []

    def emit(rec):
        if rec["step"] % eval_every == 0 and not rec["skipped"]:
            log.append(rec)

    state = trainer.run_pretraining(
        cfg.train_config(), cfg.vit_config(), cfg.augment_config(), train_px,
        out_dir=f"/tmp/explore_eta{eta}", cfg_hash=cfg.config_hash(),
        emit=emit, max_steps=steps,
    )
    acc, loss = evaluate.position_eval(trainer.eval_params(state), pairs)
    h = evaluate.mean_prediction_entropy(trainer.eval_params(state), pairs, cfg.tau_student)
    print(f"eta={eta}: steps={state.step} heldout_acc={acc:.4f} ({acc*64:.1f}x chance) "
          f"loss={loss:.3f} H={h:.3f} elapsed={time.time()-t0:.0f}s")
    for rec in log:
        print("  ", {k: (round(v, 4) if isinstance(v, float) else v)
                     for k, v in rec.items() if k in ("step", "loss", "pos_accuracy", "entropy", "lr")})
    return acc


if __name__ == "__main__":
    etas = [float(x) for x in sys.argv[1:]] or [0.8, 1.0]
    for eta in etas:
        run(eta)
