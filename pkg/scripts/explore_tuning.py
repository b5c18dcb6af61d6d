"""Grid probe of desk-scale optimization knobs for the position task."""

import itertools
import sys
import time

import numpy as np

from loca import datagen, evaluate, trainer
from loca.config import parse_config


def run(tag, steps=1000, corpus_size=512, eval_pairs=150, **flags):
    base = {"corpus_size": corpus_size}
    base.update(flags)
    train_n = corpus_size // 2
    cfg0 = parse_config(flags=base)
    per_epoch = train_n // cfg0.batch_size
    epochs = (steps + per_epoch - 1) // per_epoch
    base["epochs"] = int(epochs)
    cfg = parse_config(flags=base)

    corpus = datagen.build_corpus(corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train, held = datagen.split_by_parity(corpus)
    pairs = evaluate.make_eval_pairs(
        [im.pixels for im in held], eval_pairs, cfg.vit_config(), cfg.augment_config(),
        cfg.eta, cfg.structured_mask, seed=cfg.seed,
    )
    trace = []

    def emit(rec):
        if rec["step"] % 200 == 0 and not rec["skipped"]:
            trace.append((rec["step"], round(rec["pos_accuracy"], 4), round(rec["loss_position"], 3)))

    t0 = time.time()
    state = trainer.run_pretraining(
        cfg.train_config(), cfg.vit_config(), cfg.augment_config(),
        [im.pixels for im in train], out_dir=None, emit=emit, max_steps=steps,
    )
    acc, loss = evaluate.position_eval(trainer.eval_params(state), pairs)
    # also student-encoder eval for comparison
    acc_student, _ = evaluate.position_eval(state.student, pairs)
    print(f"[{tag}] heldout acc teacher={acc:.4f} ({acc*64:.1f}x) student={acc_student:.4f} "
          f"({acc_student*64:.1f}x) pos_loss={loss:.3f} elapsed={time.time()-t0:.0f}s")
    print(f"    train trace (step, acc, pos_loss): {trace}")
    sys.stdout.flush()
    return acc


if __name__ == "__main__":
    which = sys.argv[1]
    if which == "eta0":
        run("eta0 lr1e-3", eta=0.0)
    elif which == "lr3":
        run("eta0.8 lr3e-3 warmup", eta=0.8, base_lr=3e-3, warmup_epochs=3)
    elif which == "q10":
        run("eta0.8 lr1e-3 q10", eta=0.8, queries=10)
    elif which == "lr5":
        run("eta0.8 lr5e-3 warmup", eta=0.8, base_lr=5e-3, warmup_epochs=3)
    elif which == "lr3q10":
        run("eta0.8 lr3e-3 q10 warmup", eta=0.8, base_lr=3e-3, queries=10, warmup_epochs=3)
