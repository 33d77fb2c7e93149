"""Scratch calibration for acceptance fixture sizes (not part of the package)."""
import pathlib
import tempfile
import time

from cineseg.cli import run_evaluation
from cineseg.dataset import split_manifest, write_manifest
from cineseg.model import ModelConfig, build_model
from cineseg.phantom import ScanSpec, default_jitter_for_size, default_params_for_size, generate_dataset
from cineseg.train import TrainConfig, train_loop

SLICES = ("basal", "mid", "apical")


def make_dataset(tmp, n_scans, views, size=32, phases=8, seed0=500):
    base = default_params_for_size(size, phases)
    jit = default_jitter_for_size(size)
    specs = []
    for i in range(n_scans):
        pairs = tuple((v, SLICES[i % 3]) for v in views)
        specs.append(ScanSpec(f"scan{i:03d}", seed=seed0 + i, views=pairs, base=base, jitter=jit))
    return generate_dataset(specs, tmp)


def crit2():
    tmp = pathlib.Path(tempfile.mkdtemp())
    mf = make_dataset(tmp, 30, ("SAX",))
    mf = split_manifest(mf, 20 / 30, seed=17)
    write_manifest(mf, tmp / "manifest.tsv")
    cfg = ModelConfig()
    model, part = build_model(cfg, seed=2)
    tc = TrainConfig(lr0=5e-3, epochs=60, batch_size=5, seed=4, mode="sax",
                     augment_enabled=False, decay_every=100)
    t0 = time.monotonic()
    ckpt, hist = train_loop(model, part, mf, tc)
    t_train = time.monotonic() - t0
    rep = run_evaluation(model, mf, "test", tc)
    g = rep.groups["all"]
    print(f"crit2: train {t_train/60:.1f} min, final train dice {hist[-1]['train_dice']:.4f}")
    print(f"crit2: test dice {g.dice_mean:.4f} hd {g.hd_mean:.3f} (n={g.count})")
    for name in ("basal", "mid", "apical"):
        if name in rep.groups:
            gg = rep.groups[name]
            print(f"  {name}: dice {gg.dice_mean:.4f} hd {gg.hd_mean:.3f} n={gg.count}")


def crit3():
    tmp = pathlib.Path(tempfile.mkdtemp())
    mf = make_dataset(tmp, 12, ("SAX", "LAX"), seed0=900)
    mf = split_manifest(mf, 8 / 12, seed=21)
    write_manifest(mf, tmp / "manifest.tsv")
    results = {}
    for mode in ("sax", "lax", "multi", "multi-prompt"):
        model, part = build_model(ModelConfig(), seed=3)
        tc = TrainConfig(lr0=5e-3, epochs=60, batch_size=4, seed=5, mode=mode,
                         augment_enabled=False, decay_every=100)
        t0 = time.monotonic()
        ckpt, hist = train_loop(model, part, mf, tc)
        rep = run_evaluation(model, mf, "test", tc)
        results[mode] = rep
        parts = []
        for key in ("view:SAX", "view:LAX"):
            if key in rep.groups:
                parts.append(f"{key} dice={rep.groups[key].dice_mean:.4f}")
        print(f"crit3 {mode}: {'  '.join(parts)}  ({(time.monotonic()-t0)/60:.1f} min)")
    mp = results["multi-prompt"]
    print("deltas: |mp SAX - sax|:",
          abs(mp.groups["view:SAX"].dice_mean - results["sax"].groups["view:SAX"].dice_mean))
    print("        |mp LAX - lax|:",
          abs(mp.groups["view:LAX"].dice_mean - results["lax"].groups["view:LAX"].dice_mean))
    print("        mp LAX - multi LAX:",
          mp.groups["view:LAX"].dice_mean - results["multi"].groups["view:LAX"].dice_mean)


if __name__ == "__main__":
    crit2()
    crit3()
