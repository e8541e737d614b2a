"""Command-line entry points.

    taigen train-ddpm         --config run.yaml --out runs/ddpm
    taigen train-classifier   --config run.yaml --out runs/clf
    taigen analyze-trajectory --config run.yaml --out runs/traj
    taigen attack             --config run.yaml --out runs/attack
    taigen evaluate           runs/attack --out runs/eval

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .attack import AttackResult, batch_attack, summarize, taigen_attack
from .config import ConfigError, attack_config, config_hash, load_config
from .data import load_cifar_batches, make_shapes
from .diffusion import make_linear_schedule, sample
from .io import (
    CheckpointError,
    load_classifier,
    load_ddpm,
    save_checkpoint,
    save_png,
    write_csv,
    write_manifest,
    write_yaml,
)
from .metrics import (
    MetricReport,
    attack_success_rate,
    channel_emd,
    channel_histograms,
    fid_proxy,
    make_purifier,
    predict,
    psnr,
    robust_accuracy,
    ssim,
)
from .rng import AttackStreams
from .train import accuracy, train_classifier, train_ddpm
from .trajectory import divergence_profile, estimate_mixing_step, forward_trajectory, select_window

log = logging.getLogger("taigen")


def load_dataset(cfg: dict, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    if cfg["dataset"] == "shapes":
        n = cfg["n_train"] if split == "train" else cfg["n_test"]
        seed = cfg["data_seed"] + (0 if split == "train" else 1)
        return make_shapes(n, seed, cfg["image_size"], cfg["n_classes"])
    x, y = load_cifar_batches(cfg["dataset"], split)
    if split == "test":
        x, y = x[: cfg["n_test"]], y[: cfg["n_test"]]
    return x, y


def _slice(cfg: dict, n_available: int) -> list[int]:
    lo, n = cfg["slice_start"], cfg["slice_count"]
    if lo < 0 or n < 1 or lo + n > n_available:
        raise ConfigError(f"slice [{lo}, {lo + n}) outside the {n_available} test images")
    return list(range(lo, lo + n))


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"missing required config key: {key}")
    return cfg[key]


def _plot(path: Path, series: dict, xlabel: str, ylabel: str, invert_x: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if invert_x:
        ax.invert_xaxis()
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---- commands -------------------------------------------------------------


def cmd_train_ddpm(cfg: dict, out: Path, args) -> int:
    x, _ = load_dataset(cfg, "train")
    s = make_linear_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"], cfg["eta"])
    model, losses = train_ddpm(
        x, s, cfg["ddpm_steps"], cfg["seed"],
        batch_size=cfg["ddpm_batch_size"], lr=cfg["ddpm_lr"], weighted=cfg["ddpm_weighted_loss"],
        ema_decay=cfg["ema_decay"] or None, device=args.device,
        model_kwargs=dict(channels=tuple(cfg["ddpm_channels"]), emb_dim=cfg["ddpm_emb_dim"],
                          n_mid_attn=cfg["ddpm_mid_attn"]),
    )
    h = config_hash(cfg)
    save_checkpoint(out / "ddpm.pt", "ddpm", model.cpu(), {"schedule": s.to_dict(), "config_hash": h})
    write_csv(out / "loss.csv", ["step", "loss"], enumerate(losses))
    write_manifest(out, "train-ddpm", cfg, h, ["ddpm.pt", "loss.csv"],
                   extra={"final_loss": float(np.mean(losses[-100:]))})
    print(f"ddpm trained: {len(losses)} steps, final loss {np.mean(losses[-100:]):.4f} -> {out / 'ddpm.pt'}")
    return 0


def cmd_train_classifier(cfg: dict, out: Path, args) -> int:
    x, y = load_dataset(cfg, "train")
    xt, yt = load_dataset(cfg, "test")
    model, losses = train_classifier(
        x, y, cfg["clf_steps"], cfg["seed"], batch_size=cfg["clf_batch_size"], lr=cfg["clf_lr"],
        model_kwargs=dict(width=cfg["clf_width"], n_classes=max(int(y.max()) + 1, cfg["n_classes"])),
        device=args.device,
    )
    model = model.cpu()
    acc = accuracy(model, xt, yt)
    h = config_hash(cfg)
    save_checkpoint(out / "classifier.pt", "classifier", model, {"config_hash": h, "test_accuracy": acc})
    write_csv(out / "loss.csv", ["step", "loss"], enumerate(losses))
    write_yaml(out / "accuracy.yaml", {"test_accuracy": acc, "n_test": len(yt)})
    write_manifest(out, "train-classifier", cfg, h, ["classifier.pt", "loss.csv", "accuracy.yaml"])
    print(f"classifier trained: test accuracy {acc:.2f}% -> {out / 'classifier.pt'}")
    return 0


def cmd_analyze_trajectory(cfg: dict, out: Path, args) -> int:
    ddpm_path = _require(cfg, "ddpm_checkpoint")
    model, s = load_ddpm(ddpm_path)
    xt, yt = load_dataset(cfg, "test")
    n = min(cfg["analyze_count"], len(xt))
    idx = list(range(cfg["slice_start"], cfg["slice_start"] + n))
    x, y = xt[idx], yt[idx]
    streams = AttackStreams.derive(cfg["seed"], idx)
    fwd = forward_trajectory(x, s, streams.forward)
    x_T = fwd.states[-1]
    _, rev = sample(model, s, x_T, generator=streams.sampling)
    t_mix = estimate_mixing_step(rev.radii().tolist(), rev.timesteps, cfg["delta_r"])
    clean_prof = divergence_profile(fwd, rev)
    inputs = {"ddpm_checkpoint": ddpm_path}

    adv_prof = None
    if cfg.get("classifier_checkpoint"):
        clf = load_classifier(cfg["classifier_checkpoint"])
        inputs["classifier_checkpoint"] = cfg["classifier_checkpoint"]
        r = taigen_attack(model, s, clf, x, y, attack_config({**cfg, "early_stop": False}), indices=idx,
                          with_clean=False, record_trajectory=True, x_T=x_T)
        adv_prof = divergence_profile(fwd, r.trajectory)
        window = select_window(adv_prof, clean_prof, t_mixing=t_mix, rel_tol=cfg["divergence_rel_tol"])
    else:
        window = select_window(clean_prof, clean_prof, t_mixing=t_mix)

    r_fwd = dict(zip(fwd.timesteps, fwd.radii().tolist()))
    r_rev = dict(zip(rev.timesteps, rev.radii().tolist()))
    ts = list(range(s.T, -1, -1))
    write_csv(out / "radius.csv", ["t", "radius_forward", "radius_reverse"], [(t, r_fwd[t], r_rev[t]) for t in ts])
    adv_d = dict(adv_prof) if adv_prof else {}
    clean_d = dict(clean_prof)
    write_csv(out / "divergence.csv", ["t", "clean", "adversarial"],
              [(t, clean_d[t], adv_d.get(t, "")) for t in ts])
    win = {"t_mixing": int(t_mix), "t_start": window.t_start, "t_end": window.t_end, "N": window.N,
           "degenerate": window.degenerate, "sqrt_d": float(np.sqrt(x[0].numel()))}
    write_yaml(out / "window.yaml", win)
    _plot(out / "radius.png", {"forward": (ts, [r_fwd[t] for t in ts]), "reverse": (ts, [r_rev[t] for t in ts])},
          "t", "radius", invert_x=True)
    series = {"clean": (ts, [clean_d[t] for t in ts])}
    if adv_prof:
        series["adversarial"] = (ts, [adv_d[t] for t in ts])
    _plot(out / "divergence.png", series, "t", "solid angle (rad)", invert_x=True)
    arts = ["radius.csv", "divergence.csv", "window.yaml", "radius.png", "divergence.png"]
    write_manifest(out, "analyze-trajectory", cfg, config_hash(cfg), arts, inputs)
    print(f"t_mixing={t_mix} window=({window.t_start}, {window.t_end}) degenerate={window.degenerate}")
    return 0


def _attack_chunk(ddpm_path, clf_path, x, y, cfg_dict, indices, batch_size):
    torch.set_num_threads(1)
    model, s = load_ddpm(ddpm_path)
    clf = load_classifier(clf_path)
    results, summary = batch_attack(model, s, clf, x, y, attack_config(cfg_dict), indices, batch_size)
    return results, summary.failures


def cmd_attack(cfg: dict, out: Path, args) -> int:
    ddpm_path = _require(cfg, "ddpm_checkpoint")
    clf_path = _require(cfg, "classifier_checkpoint")
    model, s = load_ddpm(ddpm_path)
    clf = load_classifier(clf_path)
    acfg = attack_config(cfg)
    if acfg.t_start > s.T:
        raise ConfigError(f"t_start={acfg.t_start} exceeds the schedule length T={s.T}")
    xt, yt = load_dataset(cfg, "test")
    idx = _slice(cfg, len(xt))
    x, y = xt[idx], yt[idx]

    if args.workers <= 1:
        results, summary = batch_attack(model, s, clf, x, y, acfg, idx, cfg["batch_size"])
        failures = summary.failures
    else:
        chunks = np.array_split(np.arange(len(idx)), args.workers)
        results, failures = [], []
        with ProcessPoolExecutor(args.workers) as pool:
            futs = [pool.submit(_attack_chunk, ddpm_path, clf_path, x[c], y[c], cfg, [idx[i] for i in c],
                                cfg["batch_size"]) for c in chunks if len(c)]
            for f in futs:
                r, fl = f.result()
                results.extend(r)
                failures.extend(fl)
    if not results:
        print("attack failed for every image", file=sys.stderr)
        return 2
    done = [i for i in idx if i not in {f[0] for f in failures}]
    pos = [idx.index(i) for i in done]
    merged = AttackResult.concat(results)
    xs, ys = x[pos], y[pos]
    summary = summarize(results, failures)

    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    arts = []
    for k, i in enumerate(done):
        for name, t in (("input", xs[k]), ("adversarial", merged.adversarial[k]), ("clean", merged.clean_reconstruction[k])):
            rel = f"images/{i:05d}_{name}.png"
            save_png(out / rel, t)
            arts.append(rel)
    np.savez_compressed(
        out / "arrays.npz", indices=np.array(done), labels=ys.numpy(), inputs=xs.numpy(),
        adversarial=merged.adversarial.numpy(), clean=merged.clean_reconstruction.numpy(),
    )
    clean_pred = predict(clf, merged.clean_reconstruction)
    adv_pred = predict(clf, merged.adversarial)
    rows = [
        (i, int(ys[k]), int(merged.target_class_used[k]), int(merged.success[k]), int(clean_pred[k]),
         int(adv_pred[k]), int(merged.steps_used[k]), int(merged.inner_grad_evals[k]),
         float(merged.psnr[k]), float(merged.ssim[k]))
        for k, i in enumerate(done)
    ]
    write_csv(out / "results.csv", ["index", "label", "target_class", "success", "clean_pred", "adv_pred",
                                    "steps_used", "grad_evals", "psnr", "ssim"], rows)
    summ = summary.to_dict()
    summ["clean_misclassification"] = 100.0 * float((clean_pred != ys).float().mean())
    summ["reverse_steps_total"] = int(merged.steps_used.sum())
    summ["failures"] = [list(f) for f in failures]
    write_yaml(out / "summary.yaml", summ)
    arts += ["arrays.npz", "results.csv", "summary.yaml"]
    write_manifest(out, "attack", cfg, config_hash(cfg), arts,
                   {"ddpm_checkpoint": ddpm_path, "classifier_checkpoint": clf_path},
                   extra={"slice": [idx[0], idx[-1] + 1], "workers": args.workers})
    print(f"attacked {len(done)} images: ASR {summary.asr:.2f}%, clean misclassification "
          f"{summ['clean_misclassification']:.2f}%, PSNR {summary.psnr_mean:.2f} dB, "
          f"mean steps {summary.steps_used_mean:.1f}")
    return 0 if not failures else 2


def cmd_evaluate(cfg: dict, out: Path, args) -> int:
    res_dir = Path(args.results)
    arrays = np.load(res_dir / "arrays.npz")
    clf_path = _require(cfg, "classifier_checkpoint")
    clf = load_classifier(clf_path)
    labels = torch.from_numpy(arrays["labels"])
    images = torch.from_numpy(arrays[args.images])
    ref = torch.from_numpy(arrays[args.reference])
    purifier_spec = args.purifier or cfg["purifier"]
    purifier = make_purifier(purifier_spec)

    asr = attack_success_rate(clf, images, labels)
    asr_ic = attack_success_rate(clf, images, labels, "initially-correct", torch.from_numpy(arrays["inputs"]))
    p, q = psnr(images, ref), ssim(images, ref)
    hist = channel_histograms(ref, images, bins=cfg["hist_bins"])
    emd = channel_emd(ref, images)
    fid = None
    if len(images) > 1:
        fid, ridge = fid_proxy(ref, images, clf.penultimate, return_ridge=True)
    report = MetricReport(
        asr=asr, asr_mode="all", asr_initially_correct=asr_ic,
        robust_accuracy=robust_accuracy(clf, purifier, images, labels), purifier=purifier_spec,
        psnr=p.tolist(), ssim=q.tolist(), fid_proxy=fid, fid_ridge=ridge if fid is not None else 0.0,
        channel_emd=emd.tolist(),
    )
    purified_pred = predict(clf, purifier(images))
    pred = predict(clf, images)
    write_csv(out / "metrics.csv", ["index", "label", "pred", "purified_pred", "success", "psnr", "ssim"],
              [(int(i), int(labels[k]), int(pred[k]), int(purified_pred[k]), int(pred[k] != labels[k]),
                float(p[k]), float(q[k])) for k, i in enumerate(arrays["indices"])])
    (out / "summary.txt").write_text(
        f"images: {args.images} vs reference: {args.reference} ({len(images)} images)\n" + report.summary() + "\n"
    )
    rows = []
    for c, name in enumerate("RGB"):
        for b in range(len(hist["edges"]) - 1):
            rows.append((name, float(hist["edges"][b]), float(hist["edges"][b + 1]),
                         int(hist["clean"][c, b]), int(hist["adversarial"][c, b])))
    write_csv(out / "histograms.csv", ["channel", "bin_lo", "bin_hi", "reference", "images"], rows)
    centers = (hist["edges"][:-1] + hist["edges"][1:]) / 2
    series = {}
    for c, name in enumerate("RGB"):
        series[f"{name} reference"] = (centers, hist["clean"][c])
        series[f"{name} {args.images}"] = (centers, hist["adversarial"][c])
    _plot(out / "histograms.png", series, "pixel value", "count")
    write_manifest(out, "evaluate", cfg, config_hash(cfg),
                   ["metrics.csv", "summary.txt", "histograms.csv", "histograms.png"],
                   {"classifier_checkpoint": clf_path, "results": res_dir / "arrays.npz"},
                   extra={"images": args.images, "reference": args.reference})
    print(report.summary())
    return 0


COMMANDS = {
    "train-ddpm": cmd_train_ddpm,
    "train-classifier": cmd_train_classifier,
    "analyze-trajectory": cmd_analyze_trajectory,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taigen", description="Few-step adversarial sampling with a toy DDPM.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat YAML config (a run manifest also works)")
        sp.add_argument("--seed", type=int, help="master seed, overrides the config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="worker processes (deterministic only with 1)")
        sp.add_argument("--device", default="cpu")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("analyze-trajectory", "attack"):
            sp.add_argument("--ddpm", dest="ddpm_checkpoint", help="noise predictor checkpoint")
        if name in ("analyze-trajectory", "attack", "evaluate"):
            sp.add_argument("--classifier", dest="classifier_checkpoint", help="classifier checkpoint")
        if name == "attack":
            sp.add_argument("--early-stop", dest="early_stop", action="store_true", default=None)
            sp.add_argument("--epsilon", type=float)
        if name == "evaluate":
            sp.add_argument("results", help="attack results directory")
            sp.add_argument("--purifier", help="identity | blur:<sigma>")
            sp.add_argument("--images", default="adversarial", choices=["adversarial", "clean", "inputs"])
            sp.add_argument("--reference", default="inputs", choices=["adversarial", "clean", "inputs"])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1) if args.workers <= 1 else None
    overrides = {"seed": args.seed}
    for key in ("ddpm_checkpoint", "classifier_checkpoint", "early_stop", "epsilon"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    try:
        if args.command == "evaluate" and args.config is None:
            # reuse the attack run's configuration
            cfg = load_config(Path(args.results) / "manifest.yaml", overrides)
        else:
            cfg = load_config(args.config, overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, FileNotFoundError, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
