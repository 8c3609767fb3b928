import time, logging, pickle, shutil
logging.basicConfig(level=logging.WARNING)
from pathlib import Path
import numpy as np
from melab import datagen as dg, training as tr, model as md, evaluation as ev
from melab import analysis as an

for ds_seed in (0, 1):
    out = Path(f"/tmp/p12ds{ds_seed}")
    shutil.rmtree(out, ignore_errors=True)
    manifest = dg.build_dataset(dg.DatasetConfig(seed=ds_seed), out)
    t0 = time.perf_counter()
    pre_v = tr.pretrain_vision(manifest, out, ds_seed, epochs=16, batch_size=24,
                               temperature=0.15)
    pre_a = tr.pretrain_audio(manifest, out, ds_seed, epochs=12, batch_size=24,
                              context_frames=20)
    arts = {"vision": pre_v.arrays, "audio": pre_a.arrays}
    print(f"seed {ds_seed}: pretrain {time.perf_counter()-t0:.0f}s "
          f"(vision {pre_v.initial_loss:.2f}->{pre_v.epoch_losses[-1]:.2f}, "
          f"audio {pre_a.initial_loss:.2f}->{pre_a.epoch_losses[-1]:.2f})", flush=True)
    cfg = tr.TrainConfig(seed=ds_seed, max_epochs=100, patience=4,
                         audio_pretrained=True, vision_pretrained=True)
    t0 = time.perf_counter()
    result = tr.train(cfg, manifest, out, pretrain_artifacts=arts)
    vals = [e.val_acc for e in result.log.entries]
    print(f"  train: {len(vals)} epochs {time.perf_counter()-t0:.0f}s "
          f"best {result.best.epoch} val {max(vals):.3f}", flush=True)
    Path(f"/tmp/p12best{ds_seed}.pkl").write_bytes(pickle.dumps(
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
