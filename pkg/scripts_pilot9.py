import time, logging, pickle, shutil
logging.basicConfig(level=logging.WARNING)
from pathlib import Path
import numpy as np
from melab import datagen as dg, training as tr, model as md, evaluation as ev
from melab import analysis as an

for ds_seed in (0, 1, 2):
    out = Path(f"/tmp/p9ds{ds_seed}")
    shutil.rmtree(out, ignore_errors=True)
    manifest = dg.build_dataset(dg.DatasetConfig(seed=ds_seed), out)
    cfg = tr.TrainConfig(seed=ds_seed, max_epochs=100, patience=4)
    t0 = time.perf_counter()
    result = tr.train(cfg, manifest, out)
    vals = [e.val_acc for e in result.log.entries]
    print(f"seed {ds_seed}: {len(vals)} epochs {time.perf_counter()-t0:.0f}s "
          f"best {result.best.epoch} val {max(vals):.3f}", flush=True)
    Path(f"/tmp/p9best{ds_seed}.pkl").write_bytes(pickle.dumps(
        {n: t.data for n, t in result.best.params.tensors.items()}))
    feats = tr.FeatureStore(manifest, out)
    scorer = ev.CheckpointScorer(result.best.params, feats)
    rows, records = ev.full_battery(scorer, manifest, n_episodes=150, seed=42)
    print("  " + " ".join(f"{r.kind}={r.accuracy:.3f}(t{r.n_ties})" for r in rows), flush=True)
    groups = an.similarity_distributions(result.best.params, feats, manifest, seed=1,
                                         pairs_per_group=500)
    print("  groups:", {k: round(groups[k].median, 1) for k in "ABCD"},
          " perword:", [f"{r['class'][-2:]}:{r['accuracy']:.2f}"
                        for r in an.per_word_me(records)], flush=True)
