"""Command-line interface.

Commands: gen-data, build-model, train, explain, prototypes fit|assign and
eval-perturb.  Every command takes ``--config FILE`` (``key = value``
lines, flags win), ``--out``, ``--seed`` and ``--jobs``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("conceptlrp")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class ConfigError(Exception):
    """Bad flags, config file or paths (exit 2)."""


class DataError(Exception):
    """Inputs are well-formed but cannot be processed (exit 3)."""


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _dump_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _existing(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _csv(text) -> list[str]:
    if text is None:
        return []
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text) -> list[int]:
    out = []
    for tok in _csv(text):
        if "-" in tok:
            lo, hi = tok.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(tok))
    return out


def _echo(args) -> dict:
    skip = {"func", "config_values"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and not k.startswith("_")}


# ---------------------------------------------------------------------------
# shared loaders


def _load_model(path):
    from .graph import load_model
    return load_model(_existing(path, "model"))


def _load_dataset(path):
    from .zoo.scenes import Dataset
    root = _existing(path, "data")
    if not (root / "manifest.json").is_file():
        raise ConfigError(f"{root} is not a dataset directory (no manifest.json)")
    return Dataset(root)


def _rules(args):
    from .lrp import RuleAssignment, default_rules, parse_rule
    defaults = default_rules(float(args.eps))
    overrides = {}
    for item in _csv(args.rules):
        if "=" not in item:
            raise ConfigError(f"rule {item!r} must look like KIND=rule or node=rule")
        key, text = item.split("=", 1)
        rule = parse_rule(text)
        if key in defaults or key in ("Conv2D", "Add", "BilinearResize", "GatedMul", "ReLU", "Sigmoid"):
            defaults[key] = rule
        else:
            overrides[key] = rule
    return RuleAssignment(defaults, overrides)


def penultimate_conv(graph, head: str) -> str:
    """The second Conv2D met walking upstream from ``head``."""
    up = graph.upstream(head)
    convs = [n.id for n in reversed(graph.nodes) if n.id in up and n.kind == "Conv2D"]
    if len(convs) < 2:
        raise DataError(f"head {head!r} has no penultimate conv layer")
    return convs[1]


def _target(graph, tape, args):
    from .graph import TargetSpec
    from .perturb import default_target
    cls = None if args.class_index is None else int(args.class_index)
    if args.cell is not None:
        r, c = (int(v) for v in str(args.cell).split(","))
        head = args.head or "classes"
        if cls is None:
            cls = int(tape.values[head][0, :, r, c].argmax())
        return TargetSpec(head, "detection", cls, cell=(r, c))
    try:
        target = default_target(tape, cls, args.head)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if target is None:
        raise DataError("target resolution failed: the requested class is predicted nowhere")
    return target


def _input_image(args, dataset=None):
    from PIL import Image
    if args.image is not None:
        p = _existing(args.image, "image")
        arr = np.asarray(Image.open(p).convert("RGB"))
        return arr.transpose(2, 0, 1)[None].astype(np.float64) / 255.0, p.stem
    dataset = dataset or _load_dataset(args.data)
    i = int(args.index)
    if not 0 <= i < len(dataset):
        raise ConfigError(f"index {i} outside dataset of {len(dataset)}")
    return dataset.image(i), dataset.ids[i]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from .zoo.scenes import SceneConfig, gen_dataset
    if args.out is None:
        raise ConfigError("--out is required")
    try:
        cfg = SceneConfig(size=int(args.size), cars=(int(args.min_cars), int(args.max_cars)),
                          car_colors=tuple(_csv(args.car_colors)), road_prob=float(args.road_prob))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    gen_dataset(cfg, int(args.n), int(args.seed), args.out, jobs=int(args.jobs))
    return EXIT_OK


def cmd_build_model(args) -> int:
    from .graph import save_model
    from .zoo.models import build_model
    if args.out is None:
        raise ConfigError("--out is required")
    try:
        graph = build_model(args.arch, args.weights, int(args.seed), bias=not args.no_bias)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    save_model(graph, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .graph import save_model
    from .zoo.train import TrainingDiverged, evaluate_pixel_accuracy, train_sgd
    if args.out is None:
        raise ConfigError("--out is required")
    graph = _load_model(args.model)
    data = _load_dataset(args.data)
    out = Path(args.out)
    try:
        model, history = train_sgd(graph, data, int(args.epochs), float(args.lr), int(args.seed), int(args.batch_size))
    except TrainingDiverged as e:
        _dump_json({"status": "diverged", "message": str(e), "loss_history": e.history, "config": _echo(args)},
                   out / "history.json")
        raise DataError(str(e)) from e
    save_model(model, out)
    report = {"status": "ok", "loss_history": history, "config": _echo(args)}
    if model.meta.get("task") == "segmentation":
        report["train_pixel_accuracy"] = evaluate_pixel_accuracy(model, data)
    _dump_json(report, out / "history.json")
    return EXIT_OK


def cmd_explain(args) -> int:
    from .concepts import concept_vector, conditional_heatmap, input_heatmap, render_heatmap
    from .graph import forward, select_scalar
    from .lrp import lrp_backward
    if args.out is None:
        raise ConfigError("--out is required")
    graph = _load_model(args.model)
    rules = _rules(args)
    x, sample = _input_image(args)
    tape = forward(graph, x)
    target = _target(graph, tape, args)
    layers = _csv(args.layers) or [penultimate_conv(graph, target.head)]
    for layer in layers:
        if layer not in graph:
            raise ConfigError(f"unknown layer {layer!r}")
    scalar, seed = select_scalar(tape, target)
    rtape = lrp_backward(tape, seed, rules, head=target.head)
    out = Path(args.out)
    render_heatmap(input_heatmap(rtape), out / "heatmap.png")
    top_m = int(args.top_m)
    concepts = {}
    for layer in layers:
        cv = concept_vector(rtape, layer, sample, target.to_dict())
        top = sorted(range(len(cv)), key=lambda c: (-abs(cv.values[c]), c))[:top_m]
        files = []
        for c in top:
            name = f"concept_{layer}_{c}.png"
            render_heatmap(conditional_heatmap(tape, layer, [c], seed, rules, target.head, rtape), out / name)
            files.append(name)
        concepts[layer] = {"values": cv.values.tolist(), "top_concepts": top, "heatmaps": files}
    bundle = {
        "config": _echo(args),
        "seeds": {"seed": int(args.seed)},
        "sample": sample,
        "target": target.to_dict(),
        "rules": rules.to_dict(),
        "explained_scalar": scalar,
        "conservation": rtape.report.summary(),
        "concepts": concepts,
        "heatmap": "heatmap.png",
    }
    _dump_json(bundle, out / "explanation.json")
    return EXIT_OK


def _collect_vectors(graph, dataset, indices, layer, rules, class_index, head=None):
    """Normalised-ready raw concept vectors for the given samples; skipped ids listed separately."""
    from .graph import forward, select_scalar
    from .lrp import lrp_backward
    from .perturb import default_target
    rows, ids, skipped = [], [], []
    for i in indices:
        tape = forward(graph, dataset.image(i))
        target = default_target(tape, class_index, head)
        if target is None:
            skipped.append(dataset.ids[i])
            continue
        _, seed = select_scalar(tape, target)
        R = lrp_backward(tape, seed, rules, head=target.head).relevance[layer]
        rows.append(R[0].sum(axis=(1, 2)))
        ids.append(dataset.ids[i])
    return np.array(rows), ids, skipped


def cmd_prototypes_fit(args) -> int:
    from .pcx import ConceptMatrix, calibrate_outliers, fit_gmm, k_diagnostic, prototype_summary
    if args.out is None:
        raise ConfigError("--out is required")
    if args.k is None or args.layer is None:
        raise ConfigError("--k and --layer are required")
    graph = _load_model(args.model)
    if args.layer not in graph:
        raise ConfigError(f"unknown layer {args.layer!r}")
    data = _load_dataset(args.data)
    indices = _int_list(args.indices) if args.indices else list(range(len(data)))
    cls = None if args.class_index is None else int(args.class_index)
    raw, ids, skipped = _collect_vectors(graph, data, indices, args.layer, _rules(args), cls, args.head)
    matrix = ConceptMatrix.from_raw(raw, ids, args.layer, {"class_index": cls})
    k = int(args.k)
    if k < 1 or k > len(matrix):
        raise ConfigError(f"K={k} must lie in [1, N={len(matrix)}]")
    gmm = fit_gmm(matrix, k, int(args.seed), int(args.max_iter), float(args.tol))
    summary = prototype_summary(gmm, matrix, int(args.top_m))
    cal = calibrate_outliers(gmm, matrix, float(args.q))
    store = {
        "config": _echo(args),
        "layer": args.layer,
        "seed": int(args.seed),
        "gmm": gmm.to_dict(),
        "summary": summary.to_dict(),
        "calibration": cal.to_dict(),
        "training": {"samples": matrix.sample_ids, "labels": summary.labels.tolist(),
                     "excluded": matrix.excluded, "skipped": skipped},
    }
    if args.k_range:
        store["k_diagnostic"] = k_diagnostic(matrix.values[::2], matrix.values[1::2], _int_list(args.k_range),
                                             int(args.seed))
        for kk, ll in store["k_diagnostic"].items():
            print(f"K={kk}: validation mean log-likelihood {ll:.4f}")
    _dump_json(store, Path(args.out) / "prototypes.json")
    return EXIT_OK


def cmd_prototypes_assign(args) -> int:
    from .graph import forward, select_scalar
    from .lrp import lrp_backward
    from .pcx import GmmModel, OutlierCalibration, assign, difference_to_prototype, normalize_vector, outlier_score
    if args.out is None:
        raise ConfigError("--out is required")
    store_path = _existing(args.store, "store")
    if store_path.is_dir():
        store_path = store_path / "prototypes.json"
    try:
        store = json.loads(store_path.read_text())
        gmm = GmmModel.from_dict(store["gmm"])
        cal = OutlierCalibration.from_dict(store["calibration"])
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot read prototype store {store_path}: {e}") from e
    graph = _load_model(args.model)
    layer = store["layer"]
    rules = _rules(args)
    dataset = _load_dataset(args.data) if args.image is None else None
    if args.image is not None:
        inputs = [_input_image(args)]
    else:
        idx = _int_list(args.index) or [0]
        inputs = [(dataset.image(i), dataset.ids[i]) for i in idx]
    results = []
    for x, sample in inputs:
        tape = forward(graph, x)
        target = _target(graph, tape, args)
        _, seed = select_scalar(tape, target)
        raw = lrp_backward(tape, seed, rules, head=target.head).relevance[layer][0].sum(axis=(1, 2))
        try:
            v = normalize_vector(raw)
        except ValueError as e:
            raise DataError(f"sample {sample}: {e}") from e
        a = assign(v, gmm)
        score = outlier_score(v, gmm, cal)
        diff = difference_to_prototype(v, gmm, a.component)
        results.append({
            "sample": sample,
            "target": target.to_dict(),
            "component": a.component,
            "responsibilities": a.responsibilities.tolist(),
            "log_likelihood": score.log_likelihood,
            "percentile": score.percentile,
            "outlier": score.flag,
            "diff": diff.to_dict(top=10),
        })
    _dump_json({"config": _echo(args), "layer": layer, "results": results}, Path(args.out) / "assignment.json")
    return EXIT_OK


def render_bench_chart(report, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    width = 0.8 / max(len(report.methods), 1)
    xs = np.arange(len(report.layers))
    for ax, metric, fn in ((axes[0], "AOC (deletion)", report.mean_aoc), (axes[1], "AUC (insertion)", report.mean_auc)):
        for j, m in enumerate(report.methods):
            vals = [fn(m, l) for l in report.layers]
            ax.bar(xs + j * width, vals, width, label=f"{m} ({fn(m):.3g})")
        ax.set_xticks(xs + width * (len(report.methods) - 1) / 2, report.layers)
        ax.set_title(metric)
        ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata so reruns are byte-identical
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval_perturb(args) -> int:
    from .perturb import METHODS, parse_methods, run_benchmark
    if args.out is None:
        raise ConfigError("--out is required")
    try:
        methods = parse_methods(args.methods, int(args.seed), _rules(args))
    except ValueError as e:
        raise ConfigError(f"{e}; valid methods: {', '.join(METHODS)}" if "valid methods" not in str(e) else str(e)) from e
    graph = _load_model(args.model)
    data = _load_dataset(args.data)
    layers = _csv(args.layers) or list(graph.meta.get("concept_layers", []))
    if not layers:
        raise ConfigError("--layers is required for this model")
    for layer in layers:
        if layer not in graph:
            raise ConfigError(f"unknown layer {layer!r}")
    n = int(args.n)
    if n > len(data):
        raise ConfigError(f"--n {n} exceeds the dataset size {len(data)}")
    cls = None if args.class_index is None else int(args.class_index)
    try:
        report = run_benchmark(data, graph, layers, methods, n, int(args.seed), int(args.sample_seed), cls,
                               int(args.jobs))
    except ValueError as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    d = report.to_dict()
    d["config"] = {**d["config"], "cli": _echo(args)}
    _dump_json(d, out / "bench_report.json")
    (out / "curves.csv").write_text(report.curves_csv())
    render_bench_chart(report, out / "bench_chart.png")
    for m in report.methods:
        print(f"{m:>10}: AOC {report.mean_aoc(m):.4f}  AUC {report.mean_auc(m):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; explicit flags win")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for per-sample work")


def _explain_flags(p):
    p.add_argument("--model", help="model directory or model.json")
    p.add_argument("--rules", help="comma list of KIND=rule or node=rule, e.g. Conv2D=zplus,head1=gamma:0.25")
    p.add_argument("--eps", type=float, default=1e-6, help="epsilon of the default rules")
    p.add_argument("--head", help="output head to explain")
    p.add_argument("--class", dest="class_index", type=int, help="class channel (default: flood / argmax)")
    p.add_argument("--cell", help="detection grid cell as row,col")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptlrp", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic flood/car dataset")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--min-cars", type=int, default=0)
    p.add_argument("--max-cars", type=int, default=3)
    p.add_argument("--car-colors", default="white,dark,red")
    p.add_argument("--road-prob", type=float, default=0.8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-model", help="write a toy model (handcrafted or random weights)")
    _common(p)
    p.add_argument("--arch", choices=["toy-pid", "toy-det"], default="toy-pid")
    p.add_argument("--weights", choices=["handcrafted", "random"], default="handcrafted")
    p.add_argument("--no-bias", action="store_true")
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("train", help="train a model with plain mini-batch gradient descent")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="LRP heatmap, concept vectors and concept-conditioned heatmaps")
    _common(p)
    _explain_flags(p)
    p.add_argument("--image", help="RGB PNG input")
    p.add_argument("--data", help="dataset directory (with --index)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layers", help="comma list of concept layers (default: penultimate conv of the head)")
    p.add_argument("--top-m", type=int, default=3)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("prototypes", help="fit or apply prototypical concept explanations")
    psub = p.add_subparsers(dest="action", required=True)
    f = psub.add_parser("fit")
    _common(f)
    _explain_flags(f)
    f.add_argument("--data")
    f.add_argument("--layer")
    f.add_argument("--k", type=int)
    f.add_argument("--q", type=float, default=5.0, help="outlier percentile in (0, 50]")
    f.add_argument("--indices", help="sample indices, e.g. 0-99 (default: all)")
    f.add_argument("--max-iter", type=int, default=200)
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--top-m", type=int, default=5)
    f.add_argument("--k-range", help="also print validation log-likelihood for these K, e.g. 1-6")
    f.set_defaults(func=cmd_prototypes_fit)
    a = psub.add_parser("assign")
    _common(a)
    _explain_flags(a)
    a.add_argument("--store", help="prototypes.json or the directory holding it")
    a.add_argument("--image")
    a.add_argument("--data")
    a.add_argument("--index", help="sample indices, e.g. 3 or 0-9")
    a.set_defaults(func=cmd_prototypes_assign)

    p = sub.add_parser("eval-perturb", help="feature-map deletion/insertion benchmark")
    _common(p)
    _explain_flags(p)
    p.add_argument("--data")
    p.add_argument("--methods", default="lrp,gradient,gradcam,activation,random")
    p.add_argument("--layers", help="comma list (default: the model's concept layers)")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--sample-seed", type=int, default=0, help="seed of the sample selection (--seed drives Random)")
    p.set_defaults(func=cmd_eval_perturb)
    return parser


def _subparser_for(parser, argv):
    """The innermost parser of the command named in ``argv``."""
    node = parser
    for tok in argv:
        actions = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions or tok not in actions[0].choices:
            continue
        node = actions[0].choices[tok]
    return node


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known_pre, _ = pre.parse_known_args(argv)
    if known_pre.config:
        values = read_config(known_pre.config)
        target = _subparser_for(parser, argv)
        known = {a.dest: a for a in target._actions}
        unknown = sorted(set(values) - set(known) - {"config"})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, text in values.items():
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = text.lower() in ("1", "true", "yes", "on")
            else:
                # argparse applies ``type`` to string defaults
                defaults[key] = text
        target.set_defaults(**defaults)
        # required flags may now come from the config
        for action in target._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .graph import GraphError
    from .lrp import RuleConfigError
    try:
        return args.func(args)
    except (ConfigError, RuleConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # any other failure while processing data
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
