"""Command-line front end.

Every subcommand writes into ``--out-dir`` and leaves a ``manifest.json``
recording the resolved configuration, the seed and git-style content hashes
of the input files, so a run can be repeated from its manifest.  Options can
also come from a JSON file given with ``--config``; keys must name options of
the chosen subcommand.  A run's own manifest is accepted there too, which
replays that run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, data, modelio, plotting, readout, rbm, synchrony
from .complexunit import DEFAULT_MIX, ActivationMode, phase_response_table

log = logging.getLogger("phasebind")

# options holding input paths; each must exist before a command runs
INPUT_PATHS = ("data", "model", "states", "truth", "images", "labels", "mnist", "config")


class ConfigError(Exception):
    pass


def blob_hash(path: Path) -> str:
    """Git blob hash of a file's contents."""
    content = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def parse_range(spec: str | None, n: int) -> list[int]:
    """``"0-4,9"`` style index list; ``None`` means all ``n``."""
    if not spec:
        return list(range(n))
    out = []
    for part in spec.split(","):
        a, _, b = part.partition("-")
        out.extend(range(int(a), int(b) + 1) if b else [int(a)])
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise ConfigError(f"image indices out of range: {bad}")
    return out


def parse_layers(spec: str) -> list[tuple[int, int]]:
    """``"7:3,10:4,13:676"`` -> [(rf, channels), ...]"""
    try:
        return [tuple(int(x) for x in part.split(":")) for part in spec.split(",")]
    except ValueError:
        raise ConfigError(f"bad --layers spec {spec!r}; expected rf:channels,...") from None


def image_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args, out: Path) -> list[Path]:
    mnist = None
    if args.kind == "mnist_plus_shape":
        if not args.mnist:
            raise ConfigError("--mnist is required for mnist_plus_shape")
        mnist = _load_digits(Path(args.mnist), args.threshold)
    spec = data.DatasetSpec(args.kind, args.count, args.seed, side=args.side, n_bars=args.n_bars)
    ds = data.generate(spec, mnist)
    path, tpath = data.save_dataset(ds, out / f"{args.name or args.kind}.pbimg")
    sheet = plotting.render_image_sheet(ds.images[:20], ds.shape, out / "preview.png")
    return [p for p in (path, tpath, sheet) if p]


def _load_digits(path: Path, threshold: float) -> np.ndarray:
    if path.suffix == ".pbimg":
        return data.load_dataset(path).images
    return data.binarize(data.read_idx_images(path), threshold)


def cmd_fetch_mnist(args, out: Path) -> list[Path]:
    images = data.read_idx_images(Path(args.images))
    if args.limit:
        images = images[: args.limit]
    ds = data.Dataset(data.binarize(images, args.threshold), kind="mnist")
    path, _ = data.save_dataset(ds, out / "mnist.pbimg")
    outputs = [path]
    if args.labels:
        labels = data.read_idx_labels(Path(args.labels))[: len(images)]
        lp = out / "mnist.labels"
        lp.write_text("\n".join(map(str, labels)) + "\n")
        outputs.append(lp)
    outputs.append(plotting.render_image_sheet(ds.images[:20], ds.shape, out / "preview.png"))
    return outputs


def _train_configs(args, n_layers: int) -> list[rbm.TrainConfig]:
    base = rbm.TRAIN_PRESETS.get(args.preset, rbm.TrainConfig())
    overrides = {k: getattr(args, k) for k in
                 ("algorithm", "k", "lr", "momentum", "weight_decay", "epochs",
                  "batch_size", "lr_decay", "n_chains") if getattr(args, k) is not None}
    base = replace(base, seed=args.seed, **overrides)
    return [replace(base, seed=args.seed + i) for i in range(n_layers)]


def cmd_train(args, out: Path) -> list[Path]:
    ds = data.load_dataset(args.data)
    x = ds.flat(np.float32)
    if args.limit:
        x = x[: args.limit]
    h, w = ds.shape
    if args.layers:
        layers = parse_layers(args.layers)
    elif args.preset:
        layers = rbm.ARCHITECTURES[args.preset][1]
    else:
        raise ConfigError("give --preset or --layers")
    geoms = rbm.stack_geometries((h, w, 1), layers)
    configs = _train_configs(args, len(geoms))
    logs = [open(out / f"train-layer{i}.log", "w") for i in range(len(geoms))]
    curves: list[list[tuple[int, float]]] = [[] for _ in geoms]

    def on_epoch(i, epoch, err, lr):
        line = rbm.format_epoch_line(epoch, err, lr)
        logs[i].write(line + "\n")
        logs[i].flush()
        curves[i].append((epoch, err))
        log.info("layer %d %s", i, line)

    try:
        model = rbm.train_stack(x, geoms, configs, on_epoch=on_epoch)
    finally:
        for f in logs:
            f.close()
    path = modelio.save_model(model, out / "model.pbm")
    outputs = [path] + [out / f"train-layer{i}.log" for i in range(len(geoms))]
    fig, ax = plotting.figure()
    for i, c in enumerate(curves):
        if c:
            e, r = zip(*c)
            ax.plot(e, r, marker="o", ms=2, label=f"layer {i}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("reconstruction MSE")
    ax.legend(frameon=False)
    outputs.append(plotting.save(fig, out / "training.png"))
    log.info("model %s", modelio.model_summary(model))
    return outputs


def _visible_shape(model: rbm.DbmModel) -> tuple[int, int]:
    g = model.layers[0].geometry
    if g is not None:
        return g.in_height, g.in_width
    side = int(round(np.sqrt(model.layers[0].n_visible)))
    return side, model.layers[0].n_visible // side


def _layer_shapes(model: rbm.DbmModel) -> list[tuple[int, int, int] | None]:
    shapes = []
    for i, layer in enumerate(model.layers):
        g = layer.geometry
        if i == 0:
            h, w = _visible_shape(model)
            shapes.append((h, w, 1) if g is None else g.in_shape)
        shapes.append(None if g is None else g.hid_shape)
    return shapes


def cmd_sample(args, out: Path) -> list[Path]:
    model = modelio.load_model(args.model)
    frames = rbm.sample_model(model, args.steps, np.random.default_rng(args.seed),
                              interval=args.interval, burn_in=args.burn_in)
    shape = _visible_shape(model)
    np.save(out / "samples.npy", frames)
    ds = data.Dataset((frames >= 0.5).astype(np.uint8).reshape(len(frames), *shape), kind="samples")
    path, _ = data.save_dataset(ds, out / "samples.pbimg")
    sheet = plotting.render_image_sheet(frames, shape, out / "samples.png")
    return [out / "samples.npy", path, sheet]


def _synch_one(job):
    model_path, image, index, cfg_dict = job
    cfg = synchrony.InferenceConfig(**cfg_dict)
    model = modelio.load_model(model_path)
    return _synch_image(model, image, index, cfg)


def _synch_image(model, image, index, cfg):
    seed = int(image_seed(cfg.seed, index).generate_state(1)[0])
    return synchrony.run(model, image, replace(cfg, seed=seed))


def cmd_synch(args, out: Path) -> list[Path]:
    model = modelio.load_model(args.model)
    ds = data.load_dataset(args.data)
    indices = parse_range(args.indices, len(ds))
    cfg = synchrony.InferenceConfig(iterations=args.iters, mode=args.mode, seed=args.seed,
                                    record_trajectory=args.trajectory,
                                    record_stride=args.record_stride, mix=args.mix)
    images = [ds.images[i].reshape(-1).astype(np.float64) for i in indices]
    if args.workers > 1:
        jobs = [(str(args.model), img, i, synchrony.config_dict(cfg)) for img, i in zip(images, indices)]
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_synch_one, jobs))
    else:
        net = synchrony.SynchronyNetwork(model, cfg.mix)
        results = [_synch_image(net, img, i, cfg) for img, i in zip(images, indices)]

    states = synchrony.NetworkState(
        [synchrony.ComplexLayerState(np.stack([r.state.layers[l].rates for r in results]),
                                     np.stack([r.state.layers[l].phases for r in results]),
                                     results[0].state.layers[l].clamped)
         for l in range(len(results[0].state.layers))],
        results[0].state.iteration)
    spath = out / "states.npz"
    synchrony.save_states(spath, states, image_ids=np.array(indices),
                          image_shape=np.array(ds.shape))
    outputs = [spath]
    shapes = _layer_shapes(model)
    for j, (idx, res) in enumerate(zip(indices, results)):
        for l, layer in enumerate(res.state.layers):
            if shapes[l] is None:
                continue
            rgb = plotting.render_phase_image(layer, shapes[l])
            outputs.append(plotting.write_png(out / f"phase_img{idx:05d}_layer{l}.png", rgb, scale=4))
        if res.trajectory is not None:
            tp = out / f"trajectory_img{idx:05d}.bin"
            synchrony.write_trajectory(res.trajectory, tp, {
                "model": str(args.model), "model_hash": blob_hash(Path(args.model)),
                "image_id": idx, "config": synchrony.config_dict(cfg)})
            outputs.append(tp)
    dpath = out / "drift.csv"
    with open(dpath, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "iteration", "drift"])
        for idx, res in zip(indices, results):
            for it, d in enumerate(res.drift, 1):
                w.writerow([idx, it, f"{d:.6g}"])
    outputs.append(dpath)
    return outputs


def _load_states(path):
    states, extra = synchrony.load_states(path)
    ids = extra.get("image_ids")
    n = states.visible.rates.shape[0] if states.visible.rates.ndim > 1 else 1
    if states.visible.rates.ndim == 1:
        states = synchrony.NetworkState(
            [synchrony.ComplexLayerState(l.rates[None], l.phases[None], l.clamped) for l in states.layers],
            states.iteration)
    ids = list(range(n)) if ids is None else [int(i) for i in ids]
    shape = tuple(int(s) for s in extra["image_shape"]) if "image_shape" in extra else None
    return states, ids, shape


def cmd_segment(args, out: Path) -> list[Path]:
    states, ids, shape = _load_states(args.states)
    outputs = []
    peaks_path = out / "peaks.csv"
    with open(peaks_path, "w", newline="") as pf:
        pw = csv.writer(pf)
        pw.writerow(["image_id", "n_peaks", "peak_phases"])
        for j, idx in enumerate(ids):
            vis = states.select(j).visible
            seg = readout.segment_visible(vis, args.k, seed=args.seed, shape=shape)
            np.savetxt(out / f"labels_img{idx:05d}.csv", seg.labels, fmt="%d", delimiter=",")
            outputs.append(plotting.write_png(out / f"labels_img{idx:05d}.png",
                                              plotting.label_image_rgb(seg.labels), scale=4))
            outputs.append(plotting.write_png(out / f"phase_img{idx:05d}.png",
                                              plotting.render_phase_image(vis, shape), scale=4))
            hist = readout.phase_histogram(vis, args.bins)
            peaks = readout.histogram_peaks(hist)
            outputs.append(plotting.write_histogram_csv(hist, out / f"hist_img{idx:05d}.csv"))
            outputs.append(plotting.render_histogram(hist, out / f"hist_img{idx:05d}.png", peaks))
            masks, peak_phases = readout.histogram_peak_masks(vis, args.bins, args.peak_window)
            np.save(out / f"peakmasks_img{idx:05d}.npy", masks)
            pw.writerow([idx, len(peaks), " ".join(f"{p:.6g}" for p in peak_phases)])
    outputs.append(peaks_path)
    return outputs


def cmd_decode(args, out: Path) -> list[Path]:
    model = modelio.load_model(args.model)
    states, ids, shape = _load_states(args.states)
    layer_index = args.layer if args.layer is not None else len(model.layers)
    sub = rbm.DbmModel(model.layers[:layer_index])
    outputs = []
    for j, idx in enumerate(ids):
        top = states.select(j).layers[layer_index]
        images, clusters, bg = readout.decode_clusters(sub, top, args.k, seed=args.seed)
        order = [c for c in np.argsort(np.angle(clusters.centroids)) if c != bg]
        titles = [f"phase {np.angle(clusters.centroids[c]):+.2f}" for c in order]
        np.save(out / f"decoded_img{idx:05d}.npy", images[order])
        outputs.append(plotting.render_image_sheet(images[order], shape, out / f"decoded_img{idx:05d}.png",
                                                   ncols=len(order) or 1, titles=titles))
    return outputs


def cmd_metrics(args, out: Path) -> list[Path]:
    states, ids, _ = _load_states(args.states)
    ds = data.load_dataset(args.truth)
    if not ds.truths:
        raise ConfigError(f"{args.truth} has no ground-truth sibling file")
    mpath, spath = out / "metrics.csv", out / "summary.csv"
    with open(mpath, "w", newline="") as mf, open(spath, "w", newline="") as sf:
        mw, sw = csv.writer(mf), csv.writer(sf)
        mw.writerow(["image_id", "object_id", "R", "mean_phase", "n_pixels"])
        sw.writerow(["image_id", "n_peaks", "mean_R"])
        for j, idx in enumerate(ids):
            m = readout.coherence_metrics(states.select(j).visible, ds.truths[idx], args.bins)
            for o in range(len(m.resultant)):
                mw.writerow([idx, o, f"{m.resultant[o]:.6g}", f"{m.mean_phase[o]:.6g}", int(m.n_pixels[o])])
            mean_r = np.nanmean(m.resultant) if np.any(m.n_pixels) else float("nan")
            sw.writerow([idx, m.n_peaks, f"{mean_r:.6g}"])
    return [mpath, spath]


def cmd_plot_response(args, out: Path) -> list[Path]:
    rows = phase_response_table(args.w1, args.w2, args.r1, args.r2, args.points, args.mix)
    cpath = out / "response.csv"
    with open(cpath, "w", newline="") as f:
        f.write("delta_phi,mixed,sync_only\n")
        for r in rows:
            f.write(",".join(f"{v:.17g}" for v in r) + "\n")
    return [cpath, plotting.render_response(rows, out / "response.png")]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fetch-mnist": cmd_fetch_mnist,
    "train": cmd_train,
    "sample": cmd_sample,
    "synch": cmd_synch,
    "segment": cmd_segment,
    "decode": cmd_decode,
    "metrics": cmd_metrics,
    "plot-response": cmd_plot_response,
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", type=Path, default=Path("runs/latest"))
    common.add_argument("--mode", choices=["det", "stoch"], default="det")
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--config", type=Path, help="JSON file of option values")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="phasebind", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        subs[name] = sp
        return sp

    sp = add("gen-data", "generate a synthetic dataset")
    sp.add_argument("--kind", choices=data.KINDS, required=True)
    sp.add_argument("--count", type=int, default=1000)
    sp.add_argument("--side", type=int)
    sp.add_argument("--n-bars", type=int, default=6)
    sp.add_argument("--mnist", help="binarized digits (.pbimg) or an IDX image file")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--name")

    sp = add("fetch-mnist", "ingest a local MNIST IDX file")
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--limit", type=int)

    sp = add("train", "layer-wise training of an RBM stack")
    sp.add_argument("--data", required=True)
    sp.add_argument("--preset", choices=sorted(rbm.ARCHITECTURES))
    sp.add_argument("--layers", help="rf:channels per layer, e.g. 7:3,10:4")
    sp.add_argument("--algorithm", choices=["cd", "pcd"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr-decay", type=float)
    sp.add_argument("--n-chains", type=int)
    sp.add_argument("--limit", type=int, help="train on the first N images only")

    sp = add("sample", "generate images from a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--interval", type=int, default=50)
    sp.add_argument("--burn-in", type=int, default=0)

    sp = add("synch", "run phase inference on images")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--indices", help="image indices, e.g. 0-9,15")
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--record-stride", type=int, default=1)
    sp.add_argument("--trajectory", action="store_true", help="dump per-step states")
    sp.add_argument("--mix", type=float, default=DEFAULT_MIX)

    sp = add("segment", "segment visible layers by phase")
    sp.add_argument("--states", required=True)
    sp.add_argument("--k", type=int, required=True, help="objects plus one")
    sp.add_argument("--bins", type=int, default=16)
    sp.add_argument("--peak-window", type=float)

    sp = add("decode", "decode phase clusters of a hidden layer to image space")
    sp.add_argument("--model", required=True)
    sp.add_argument("--states", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--layer", type=int, help="state layer to cluster (default: top)")

    sp = add("metrics", "phase coherence against ground truth")
    sp.add_argument("--states", required=True)
    sp.add_argument("--truth", required=True, help="dataset file with a .truth sibling")
    sp.add_argument("--bins", type=int, default=16)

    sp = add("plot-response", "tabulate the two-input phase response")
    sp.add_argument("--w1", type=float, default=1.0)
    sp.add_argument("--w2", type=float, default=1.0)
    sp.add_argument("--r1", type=float, default=1.0)
    sp.add_argument("--r2", type=float, default=1.0)
    sp.add_argument("--points", type=int, default=33)
    sp.add_argument("--mix", type=float, default=DEFAULT_MIX)
    return p, subs


def _config_path(argv: list[str]) -> Path | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--config="):
            return Path(a.split("=", 1)[1])
    return None


def _apply_config(path: Path, command: str | None, subs) -> None:
    """Load JSON option values as defaults of ``command``'s parser."""
    if command not in subs:
        return
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad config file: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    if cfg.get("tool") == "phasebind" and "config" in cfg:
        # a run manifest: replay its recorded options
        if cfg.get("command") != command:
            raise ConfigError(f"manifest is for {cfg.get('command')!r}, not {command!r}")
        cfg = cfg["config"]
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    actions = {a.dest: a for a in subs[command]._actions if a.dest not in ("help", "config")}
    unknown = sorted(k for k in cfg if k not in actions)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for k, v in cfg.items():
        a = actions[k]
        if a.type is not None and v is not None and not isinstance(v, bool):
            v = a.type(v)
        if a.choices is not None and v is not None and v not in a.choices:
            raise ConfigError(f"config key {k}: {v!r} not one of {sorted(a.choices)}")
        a.required = False
        cfg[k] = v
    subs[command].set_defaults(**cfg)


def resolve_args(argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    cfg_path = _config_path(argv)
    if cfg_path is not None:
        command = next((a for a in argv if a in subs), None)
        _apply_config(cfg_path, command, subs)
    args = parser.parse_args(argv)
    for name in INPUT_PATHS:
        value = getattr(args, name, None)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"--{name.replace('_', '-')}: no such file {value}")
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    args.mode = ActivationMode.parse(args.mode)
    return args


def write_manifest(args, out: Path, outputs: list[Path]) -> Path:
    cfg = {k: (str(v) if isinstance(v, Path) else v.value if isinstance(v, ActivationMode) else v)
           for k, v in vars(args).items() if k not in ("command", "config")}
    inputs = {}
    for name in INPUT_PATHS:
        value = getattr(args, name, None)
        if value is not None:
            inputs[name] = {"path": str(value), "blob": blob_hash(Path(value))}
    manifest = {
        "tool": "phasebind",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config": cfg,
        "inputs": inputs,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def dispatch(argv=None) -> int:
    try:
        args = resolve_args(argv)
    except ConfigError as e:
        print(f"phasebind: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        outputs = COMMANDS[args.command](args, out)
    except (ConfigError, ValueError) as e:
        print(f"phasebind {args.command}: error: {e}", file=sys.stderr)
        return 1
    write_manifest(args, out, outputs)
    for p in outputs:
        print(p)
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
