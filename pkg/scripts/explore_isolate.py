"""Isolation probes: which ingredient blocks desk-scale position learning?"""

import sys
import time

import numpy as np

from loca import datagen, evaluate, model as MD, objective as OB, trainer
from loca.augment import AugmentConfig
from loca.config import parse_config
from loca.tensor import Tensor


def run(tag, steps=800, corpus_size=512, jitter=True, cluster=True, eta=0.0,
        hflip=True, eval_pairs=150, **flags):
    base = {"corpus_size": corpus_size, "eta": eta}
    base.update(flags)
    cfg0 = parse_config(flags=base)
    train_n = corpus_size // 2
    per_epoch = train_n // cfg0.batch_size
    base["epochs"] = int((steps + per_epoch - 1) // per_epoch)
    cfg = parse_config(flags=base)

    aug = cfg.augment_config()
    if not jitter:
        aug = AugmentConfig(ref_size=aug.ref_size, query_size=aug.query_size, jitter_prob=0.0,
                            hflip_prob=aug.hflip_prob if hflip else 0.0)
    elif not hflip:
        aug = AugmentConfig(ref_size=aug.ref_size, query_size=aug.query_size, hflip_prob=0.0)

    if not cluster:
        orig = OB.cluster_loss

        def stub(student_logits, targets, corr):
            loss, probs = orig(student_logits, targets, corr)
            if loss is None:
                return None, None
            # constant zero contribution, keeps omega bookkeeping intact
            k = student_logits.shape[1]
            return Tensor(np.asarray(0.0, dtype=np.float32)), Tensor(np.full((len(corr.omega_rows), k), 1.0 / k, dtype=np.float32))

        OB.cluster_loss = stub

    corpus = datagen.build_corpus(corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train, held = datagen.split_by_parity(corpus)
    pairs = evaluate.make_eval_pairs([im.pixels for im in held], eval_pairs, cfg.vit_config(), aug,
                                     eta, cfg.structured_mask, seed=cfg.seed)
    trace = []

    def emit(rec):
        if rec["step"] % 200 == 0 and not rec["skipped"]:
            trace.append((rec["step"], round(rec["pos_accuracy"], 4), round(rec["loss_position"], 3)))

    t0 = time.time()
    state = trainer.run_pretraining(cfg.train_config(), cfg.vit_config(), aug,
                                    [im.pixels for im in train], out_dir=None, emit=emit, max_steps=steps)
    if not cluster:
        OB.cluster_loss = orig
    acc_s, _ = evaluate.position_eval(state.student, pairs)
    print(f"[{tag}] heldout student acc={acc_s:.4f} ({acc_s*64:.1f}x) elapsed={time.time()-t0:.0f}s")
    print(f"    trace: {trace}")
    sys.stdout.flush()


if __name__ == "__main__":
    which = sys.argv[1]
    if which == "nojit":
        run("eta0 nojitter", jitter=False)
    elif which == "posonly":
        run("eta0 position-only", cluster=False, lambda_memax=0.0)
    elif which == "nojit_noflip":
        run("eta0 nojitter noflip", jitter=False, hflip=False)
    elif which == "overfit":
        run("overfit tiny corpus nojitter", corpus_size=16, steps=1000, jitter=False, eval_pairs=50)
