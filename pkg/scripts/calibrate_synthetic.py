"""Second-stage calibration: variance-reduced sparsity sweep.

Averages each sweep point over several support draws per seed and adds a
near-dense top point, to pick the final 3-point sweep for the end-to-end
gap-monotonicity check. Meta-trained models are cached on disk so reruns
only pay for the fine-tuning stages.
"""

import copy
import dataclasses
import time
from pathlib import Path

import numpy as np

from sparseseg import protoseg, weasel
from sparseseg.bench import (
    ExperimentConfig,
    ShapeFamily,
    SynthSpec,
    _fresh_model,
    _meta_config,
    _supervised_train,
    build_distribution,
    build_few_shot,
    predict_dense,
    score_query,
    synth_meta_dataset,
)
from sparseseg.data import FewShotTask, SparseMask
from sparseseg.network import load_checkpoint, save_checkpoint
from sparseseg.sparsify import SparsifyConfig

META_EPOCHS = 100
TUNE_EPOCHS = 40
FOLDS = 4
SPARSITIES = [5, 20, 100, 500]
DRAWS = 3
CACHE = Path("/tmp/calib_cache")


def make_pools():
    spec = SynthSpec(
        families=[
            ShapeFamily("disks", "disk", 20, fg_level=1.0, noise=0.25),
            ShapeFamily("rects", "rectangle", 20, fg_level=1.0, noise=0.25),
            ShapeFamily("spots", "disk", 20, fg_level=0.8, noise=0.35),
        ],
        heldout=ShapeFamily("rings", "ring", 20, fg_level=0.9, noise=0.3),
    )
    return synth_meta_dataset(spec, seed=0)


def dense_few_shot(few_shot):
    sup = [
        dataclasses.replace(s, sparse_mask=SparseMask(labels=s.dense_mask.copy()))
        for s in few_shot.support
    ]
    return FewShotTask(support=sup, query=few_shot.query, target_class=2,
                       name=few_shot.name, k=few_shot.k)


def cfg(seed, method):
    return ExperimentConfig(
        method=method, shots=1, sparsify=SparsifyConfig(style="points", n=20, seed=seed),
        target="rings", folds=FOLDS, meta_epochs=META_EPOCHS, tune_epochs=TUNE_EPOCHS,
        pre_epochs=META_EPOCHS, task_batch=3, seed=seed, source_task="disks",
    )


def cached_model(name, builder):
    path = CACHE / f"{name}.pt"
    if path.exists():
        return load_checkpoint(path)
    model = builder()
    save_checkpoint(path, model)
    return model


def run_seed(pools, seed):
    out = {}
    dist = build_distribution(pools, "rings", 0, FOLDS, seed)
    tasks = {}
    for key in SPARSITIES + ["dense"]:
        n = 20 if key == "dense" else key
        tasks[key] = [
            build_few_shot(pools, "rings", 0, FOLDS, 1,
                           SparsifyConfig(style="points", n=n, seed=seed * 100 + d),
                           seed * 100 + d)
            for d in range(DRAWS)
        ]
    tasks["dense"] = [dense_few_shot(t) for t in tasks["dense"]]

    t0 = time.time()
    base = cached_model(f"weasel_{seed}", lambda: weasel.meta_train(
        _fresh_model(cfg(seed, "weasel"), 1), dist, _meta_config(cfg(seed, "weasel"))))
    print(f"  weasel meta {time.time()-t0:.0f}s", flush=True)
    for key, fss in tasks.items():
        scores = []
        for fs in fss:
            m = copy.deepcopy(base)
            weasel.fine_tune(m, fs, TUNE_EPOCHS, seed=seed)
            scores.append(score_query(predict_dense(m, fs.query), fs.query))
        out[("weasel", key)] = float(np.mean(scores))

    t0 = time.time()
    pm = cached_model(f"proto_{seed}", lambda: protoseg.meta_train_proto(
        _fresh_model(cfg(seed, "protoseg"), 1, seed_offset=1), dist,
        _meta_config(cfg(seed, "protoseg"))))
    print(f"  proto meta {time.time()-t0:.0f}s", flush=True)
    for key, fss in tasks.items():
        out[("protoseg", key)] = float(np.mean(
            [score_query(protoseg.predict(pm, fs), fs.query) for fs in fss]))

    for key, fss in tasks.items():
        scores = []
        for fs in fss:
            m = weasel.fine_tune(_fresh_model(cfg(seed, "scratch"), 1), fs, TUNE_EPOCHS, seed=seed)
            scores.append(score_query(predict_dense(m, fs.query), fs.query))
        out[("scratch", key)] = float(np.mean(scores))

    t0 = time.time()
    src = {t.name: t for t in dist.tasks}["disks"]
    pre = cached_model(f"pre_{seed}", lambda: _supervised_train(
        _fresh_model(cfg(seed, "finetune"), 1, seed_offset=2), src, META_EPOCHS,
        cfg(seed, "finetune")))
    print(f"  finetune pre {time.time()-t0:.0f}s", flush=True)
    for key, fss in tasks.items():
        scores = []
        for fs in fss:
            m = copy.deepcopy(pre)
            weasel.fine_tune(m, fs, TUNE_EPOCHS, seed=seed)
            scores.append(score_query(predict_dense(m, fs.query), fs.query))
        out[("finetune", key)] = float(np.mean(scores))
    return out


def main():
    CACHE.mkdir(exist_ok=True)
    pools = make_pools()
    results = []
    for seed in (0, 1, 2):
        t0 = time.time()
        print(f"seed {seed}", flush=True)
        res = run_seed(pools, seed)
        results.append(res)
        for k, v in sorted(res.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
            print(f"  {k}: {v:.3f}", flush=True)
        print(f"seed {seed} total {time.time()-t0:.0f}s", flush=True)

    print("\n== aggregates over seeds ==")
    for m in ("weasel", "protoseg", "scratch", "finetune"):
        means = {key: np.mean([r[(m, key)] for r in results]) for key in SPARSITIES + ["dense"]}
        gaps = [means["dense"] - means[n] for n in SPARSITIES]
        print(m, {k: round(float(v), 3) for k, v in means.items()},
              "gaps", [round(float(g), 3) for g in gaps])
    wgain = np.mean([r[("weasel", 20)] - r[("scratch", 20)] for r in results])
    print("weasel-vs-scratch @20:", round(float(wgain), 3))
    pstd = np.std([np.mean([r[("protoseg", n)] for r in results]) for n in (5, 20, 100)])
    print("protoseg std across {5,20,100}:", round(float(pstd), 4))


if __name__ == "__main__":
    main()
