"""Can the position pathway alone learn, with frozen encoders?"""

import sys
import time

import numpy as np

from loca import datagen, evaluate, model as MD, objective as OB, trainer
from loca.augment import AugmentConfig, token_vectors
from loca.config import parse_config
from loca.tensor import Tensor, Tape, backward
from loca import tensor as T


def run(tag, eta, steps=1500, lr=3e-3, jitter=False, corpus_size=512, init_ckpt=None):
    cfg = parse_config(flags={"corpus_size": corpus_size, "epochs": 999, "eta": eta})
    vit = cfg.vit_config()
    aug = cfg.augment_config()
    if not jitter:
        aug = AugmentConfig(ref_size=aug.ref_size, query_size=aug.query_size, jitter_prob=0.0)
    tc = cfg.train_config()

    corpus = datagen.build_corpus(corpus_size, cfg.corpus_seed, cfg.scene_spec())
    train = [im.pixels for im in corpus[0::2]]
    held = [im.pixels for im in corpus[1::2]]
    pairs = evaluate.make_eval_pairs(held, 150, vit, aug, eta, True, seed=1)

    if init_ckpt:
        state = trainer.load_checkpoint(init_ckpt, vit, force=True)
    else:
        state = trainer.init_train_state(tc, vit)
    student, teacher = state.student, state.teacher

    trainable = [n for n in student.names()
                 if n.startswith(("xattn.", "pos_head.")) or n == "pos_embed"]
    for n, t in student.tensors.items():
        t.requires_grad = n in trainable

    opt = trainer.AdamState()
    rng = np.random.default_rng(0)
    t0 = time.time()
    for step in range(steps):
        idx = rng.choice(len(train), size=8, replace=False)
        batch = [train[i] for i in idx]
        prepared = [trainer.prepare_sample(img, trainer.sample_rng(0, step, int(i)), tc, vit, aug)
                    for i, img in zip(idx, batch)]
        terms = []
        with Tape() as tape:
            for s in prepared:
                z_ref = MD.encode_view(teacher, token_vectors(s.reference), s.reference.grid,
                                       s.reference.kept_tokens).data
                for view, corr, plan in s.queries:
                    if not len(corr.omega_rows):
                        continue
                    z_q = MD.encode_view(student, token_vectors(view), view.grid, view.kept_tokens)
                    if plan.n_visible:
                        g = MD.cross_attend(student, z_q, Tensor(z_ref[plan.visible]), plan.visible)
                    else:
                        g = MD.cross_attend(student, z_q, None)
                    p_logits = MD.position_logits(student, g)
                    p_loss = OB.position_loss(p_logits, corr)
                    terms.append((p_loss, p_logits.data[corr.omega_rows].argmax(axis=1), corr.targets))
            if not terms:
                continue
            acc = sum(t[0] for t in terms[1:]) if False else None
            total = terms[0][0]
            for t_ in terms[1:]:
                total = T.add(total, t_[0])
            total = T.scale(total, 1.0 / len(terms))
        student.zero_grads()
        backward(tape, total)
        trainer.adamw_step(student, opt, lr, 0.1, decay_filter=lambda n, p: p.data.ndim >= 2)
        if step % 250 == 0:
            hits = sum(int((p == t).sum()) for _, p, t in terms)
            n = sum(len(t) for _, _, t in terms)
            print(f"  step {step} loss {total.item():.3f} batch-acc {hits/n:.3f}")
            sys.stdout.flush()
    acc_s, loss_s = evaluate.position_eval(student, pairs)
    print(f"[{tag}] frozen-encoder heldout acc={acc_s:.4f} ({acc_s*64:.1f}x) loss={loss_s:.3f} "
          f"elapsed={time.time()-t0:.0f}s")
    sys.stdout.flush()


if __name__ == "__main__":
    which = sys.argv[1]
    if which == "eta08":
        run("frozen eta0.8", 0.8)
    elif which == "eta0":
        run("frozen eta0", 0.0)
    elif which == "eta08_trained":
        run("frozen(trained enc) eta0.8", 0.8, init_ckpt="/tmp/explore_eta0.8/checkpoint_final.loca")
