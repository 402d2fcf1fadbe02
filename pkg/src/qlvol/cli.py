"""
Command-line front end.

Usage::

    python -m qlvol {simulate,fit,evaluate,bench} --config CFG.json --out DIR [--seed S] [--threads N]

Every run writes ``resolved_config.json`` next to its outputs. Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
import argparse
import copy
import glob
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bias_fast import check_objective, dot_objective, preaverage
from .errors import BadConfig, NonFinite, NotPD, QLVolError
from .metrics import MSE_GRIDS, default_input, gamma1, gamma2, mse_grid, sandwich_covariance
from .models import (CIRModel, ConstantModel, NeuralNetModel, PolynomialModel, SeasonalCIR2DModel,
                     VolatilityModel, train)
from .observation import build_layout, estimate_noise_variance
from .quasilik import BlockSystem, fit_argmax, quasi_loglik
from .sim import (PathConfig, SamplingConfig, model_from_dict, read_dataset,
                  simulate_dataset, write_dataset)

log = logging.getLogger("qlvol")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

PRESETS = {
    "cir1d-standard": {
        "T": 1.0, "n": 5000, "grid_steps_per_obs": 20, "replications": 100,
        "model": {"kind": "cir1d", "alpha1": 1.0, "alpha2": 1.0, "sigma": 1.0, "y0": 1.0},
        "rates": [1.0], "noise_var": [0.005],
    },
    "cir2d-standard": {
        "T": 1.0, "n": 5000, "grid_steps_per_obs": 20, "replications": 100,
        "model": {"kind": "cir2d"},
        "rates": [1.0, 1.0], "noise_var": [0.005, 0.005],
    },
    "tiny": {
        "T": 1.0, "n": 200, "grid_steps_per_obs": 20, "replications": 2,
        "model": {"kind": "cir1d", "alpha1": 1.0, "alpha2": 1.0, "sigma": 1.0, "y0": 1.0},
        "rates": [1.0], "noise_var": [0.005],
    },
}

OBJECTIVES = ("H", "check", "dot")


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _require(cond, msg):
    if not cond:
        raise BadConfig(msg)


def resolve_sim_config(cfg):
    base = copy.deepcopy(PRESETS[cfg["preset"]]) if "preset" in cfg else {}
    _require("preset" not in cfg or cfg["preset"] in PRESETS, f"unknown preset {cfg.get('preset')!r}")
    for key, val in cfg.items():
        if key == "model" and isinstance(val, dict) and "model" in base:
            base["model"].update(val)
        elif key != "preset":
            base[key] = val
    for key in ("T", "n", "model", "rates", "noise_var"):
        _require(key in base, f"simulate config is missing {key!r}")
    base.setdefault("replications", 1)
    base.setdefault("grid_steps_per_obs", 20)
    _require(int(base["replications"]) >= 1, "replications must be positive")
    return base


def _sim_objects(rc):
    mdl = model_from_dict(rc["model"])
    expected = max(rc["rates"]) * rc["n"] * rc["T"]
    steps = int(rc.get("grid_steps") or int(np.ceil(rc["grid_steps_per_obs"] * expected)))
    pc = PathConfig(T=float(rc["T"]), grid_steps=steps, model=mdl)
    sc = SamplingConfig(rates=tuple(rc["rates"]), n=float(rc["n"]), noise_var=tuple(rc["noise_var"]))
    pc.validate(expected_obs=expected)
    sc.validate()
    return pc, sc


def cmd_simulate(cfg, out, seed=0, threads=1):
    """Simulate replicated data sets and write CSV files with JSON sidecars."""
    rc = resolve_sim_config(cfg)
    pc, sc = _sim_objects(rc)
    os.makedirs(out, exist_ok=True)
    h = config_hash({"cfg": rc, "seed": seed})

    def one(r):
        ds = simulate_dataset(pc, sc, seed=[int(seed), r])
        meta = ds.metadata()
        meta.update({"replication": r, "seed": [int(seed), r], "config_hash": h})
        path = os.path.join(out, f"dataset_{r:04d}.csv")
        write_dataset(ds.obs, path, meta)
        return path

    with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
        paths = list(ex.map(one, range(int(rc["replications"]))))
    _write_json(os.path.join(out, "resolved_config.json"),
                {"command": "simulate", "config": rc, "seed": seed, "config_hash": h, "outputs": paths})
    return paths


def build_model(spec):
    """Instantiate a volatility model from a config dictionary."""
    fam = spec.get("family")
    if fam == "cir1d":
        return CIRModel()
    if fam == "cir2d":
        return SeasonalCIR2DModel(a=spec.get("a", 1.0), b=spec.get("b", -4.0 / 3.0), c=spec.get("c", 2.0 / 3.0))
    if fam == "poly":
        return PolynomialModel(degree=int(spec.get("degree", 1)), eps=float(spec.get("eps", 1e-4)))
    if fam == "constant":
        dim = int(spec.get("dim", 1))
        return ConstantModel(dim=dim, input_dim=int(spec.get("input_dim", dim + 1)))
    if fam == "nn":
        dim = int(spec.get("dim", 1))
        return NeuralNetModel(input_dim=int(spec.get("input_dim", dim + 1)), dim=dim,
                              hidden=tuple(spec.get("hidden", (10, 10))), eps=float(spec.get("eps", 1e-4)))
    raise BadConfig(f"unknown model family {fam!r}")


def model_spec(model):
    if isinstance(model, NeuralNetModel):
        return {"family": "nn", "input_dim": model.input_dim, "dim": model.dim,
                "hidden": list(model.hidden), "eps": model.eps}
    if isinstance(model, SeasonalCIR2DModel):
        return {"family": "cir2d", "a": model.a, "b": model.b, "c": model.c}
    if isinstance(model, PolynomialModel):
        return {"family": "poly", "degree": model.degree, "eps": model.eps}
    if isinstance(model, ConstantModel):
        return {"family": "constant", "dim": model.dim, "input_dim": model.input_dim}
    return {"family": "cir1d"}


def save_checkpoint(path, model, theta, extra=None):
    """Checkpoint JSON: ``{"model": spec, "theta": [...], "weights": [[...]] (nn only), ...}``."""
    doc = {"model": model_spec(model), "theta": [float(x) for x in theta]}
    if isinstance(model, NeuralNetModel):
        doc["weights"] = [w.tolist() for w in model.unflatten(theta)]
    doc.update(extra or {})
    _write_json(path, doc)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    model = build_model(doc["model"])
    if "weights" in doc:
        theta = NeuralNetModel.flatten([np.asarray(w, dtype=float) for w in doc["weights"]])
    else:
        theta = np.asarray(doc["theta"], dtype=float)
    return model, theta, doc


@dataclass
class FitReport:
    """Estimates, traces, timings and provenance of one fit."""

    theta: list
    v_hat: list
    objective: str
    trace: list = field(default_factory=list)
    skipped_blocks: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    mse: dict = field(default_factory=dict)
    divergence: float = None
    standard_errors: list = None
    n_blocks: int = 0
    b_n: float = 0.0
    init: str = ""
    config_hash: str = ""
    seed: int = 0
    dataset: str = ""


class PreparedData:
    """Block systems, noise estimates and pre-averaged matrices of one data set."""

    def __init__(self, obs, n_blocks=None, b_n=None, min_count=2):
        self.obs = obs
        self.layout = build_layout(obs, n_blocks, b_n)
        self.v_hat = estimate_noise_variance(obs, self.layout)
        self.system = BlockSystem.build(obs, self.layout, min_count=min_count)
        self.pre = preaverage(self.system, self.v_hat)

    def objective(self, model, kind):
        if kind == "H":
            fn = lambda th: quasi_loglik(model, th, self.v_hat, self.system)
        elif kind == "check":
            fn = lambda th: check_objective(model, th, self.v_hat, self.system, self.pre, verify=False)
        elif kind == "dot":
            fn = lambda th: dot_objective(model, th, self.pre)
        else:
            raise BadConfig(f"unknown objective {kind!r}")

        def wrapped(theta):
            ev = fn(np.asarray(theta, dtype=float))
            return ev.value, ev.grad_theta
        return wrapped


def _datasets(cfg):
    paths = list(cfg.get("datasets", []))
    if "dataset_glob" in cfg:
        paths += sorted(glob.glob(cfg["dataset_glob"]))
    _require(paths, "no datasets given")
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(p)
    return paths


def _truth_from_meta(meta):
    if "model" not in meta:
        return None
    return model_from_dict(meta["model"]).truth


def _stages(cfg):
    if "stages" in cfg:
        stages = cfg["stages"]
    else:
        stages = [{"objective": cfg.get("objective", "H"), "epochs": int(cfg.get("epochs", 3000))}]
    for st in stages:
        _require(st.get("objective") in OBJECTIVES, f"objective must be one of {OBJECTIVES}")
    return stages


def _fit_parametric(model, path, cfg, seed, h):
    obs, meta = read_dataset(path)
    t0 = time.perf_counter()
    prep = PreparedData(obs, cfg.get("n_blocks"), cfg.get("b_n"))
    t_prep = time.perf_counter() - t0
    obj = _stages(cfg)[-1]["objective"]
    fn = prep.objective(model, obj)
    init = np.asarray(cfg.get("init", [1.0] * model.n_params), dtype=float)
    bounds = cfg.get("bounds")
    if bounds is None and model.n_params == 1:
        bounds = [(0.05, 5.0)]
    t0 = time.perf_counter()
    res = fit_argmax(fn, init, bounds=bounds)
    t_fit = time.perf_counter() - t0
    rep = FitReport(theta=res.theta.tolist(), v_hat=prep.v_hat.tolist(), objective=obj,
                    trace=[float(x) for x in res.trace], skipped_blocks=list(prep.system.skipped),
                    timings={"prepare": t_prep, "fit": t_fit}, n_blocks=prep.layout.n_blocks,
                    b_n=prep.layout.b_n, init="given", config_hash=h, seed=seed, dataset=path)
    truth = _truth_from_meta(meta)
    if truth is not None:
        rep.mse = _mse_all(model, res.theta, truth)
        rep.standard_errors = _standard_errors(model, res.theta, prep, meta, truth)
    return rep


def _standard_errors(model, theta, prep, meta, truth):
    try:
        lay = prep.layout
        s = lay.boundaries[:-1]
        obs = prep.obs.with_time_state()
        from .observation import local_average_X
        x = np.array([local_average_X(lay, obs, m) for m in range(1, lay.n_blocks + 1)])
        sig = truth(s, x[:, 1:])
        a = np.asarray(meta["sampling"]["rates"]) * meta["sampling"]["n"] / lay.b_n
        v = np.asarray(meta["sampling"]["noise_var"])
        g1 = gamma1(model, theta, s, x, sig, a, v)
        g2 = gamma2(model, theta, s, x, sig, a, v)
        return np.sqrt(np.diag(sandwich_covariance(g1, g2, lay.b_n))).tolist()
    except (QLVolError, np.linalg.LinAlgError, KeyError):
        return None


def _mse_all(model, theta, truth):
    return {g: mse_grid(model, theta, truth, g) for g in MSE_GRIDS}


def _fit_network(model, paths, cfg, seed, h, out):
    t0 = time.perf_counter()
    preps = [PreparedData(read_dataset(p)[0], cfg.get("n_blocks"), cfg.get("b_n")) for p in paths]
    t_prep = time.perf_counter() - t0
    rng = np.random.default_rng([int(seed), 1])
    theta = model.init_params(rng)
    opt = cfg.get("optimizer", {})
    stages = _stages(cfg)
    marks = sorted(set(int(c) for c in cfg.get("checkpoints", [])))
    done, trace, saved = 0, [], {}
    t0 = time.perf_counter()
    for k, st in enumerate(stages):
        fns = [p.objective(model, st["objective"]) for p in preps]
        ep = int(st["epochs"])
        local = [c - done for c in marks if done < c <= done + ep]
        res = train(fns, theta, ep, seed=[int(seed), 2, k], checkpoints=local,
                    weight_decay=float(opt.get("weight_decay", 0.005)), rho=float(opt.get("rho", 0.95)),
                    eps=float(opt.get("eps", 1e-6)), lr=float(opt.get("lr", 1.0)))
        for c, th in res.checkpoints.items():
            saved[c + done] = th
        theta = res.theta
        trace += res.trace
        done += ep
    t_train = time.perf_counter() - t0
    meta = read_dataset(paths[0])[1]
    truth = _truth_from_meta(meta)
    ckpts = {}
    for c, th in sorted(saved.items()):
        cp = os.path.join(out, f"checkpoint_epoch{c:05d}.json")
        save_checkpoint(cp, model, th, {"epoch": c, "config_hash": h, "seed": seed})
        ckpts[c] = cp
    final = os.path.join(out, "checkpoint.json")
    save_checkpoint(final, model, theta, {"epoch": done, "config_hash": h, "seed": seed,
                                          "init": "uniform +-sqrt(6/(fan_in+fan_out))"})
    rep = FitReport(theta=theta.tolist(), v_hat=[p.v_hat.tolist() for p in preps],
                    objective="+".join(st["objective"] for st in stages), trace=trace,
                    skipped_blocks=[p.system.skipped for p in preps],
                    timings={"prepare": t_prep, "train": t_train}, n_blocks=preps[0].layout.n_blocks,
                    b_n=preps[0].layout.b_n, init="uniform +-sqrt(6/(fan_in+fan_out))",
                    config_hash=h, seed=seed, dataset=";".join(paths))
    if truth is not None:
        rep.mse = _mse_all(model, theta, truth)
    return rep, final, ckpts


def cmd_fit(cfg, out, seed=0, threads=1):
    """Fit a model to one or more data sets and write reports and checkpoints."""
    _require("model" in cfg, "fit config needs a 'model' section")
    model = build_model(cfg["model"])
    paths = _datasets(cfg)
    os.makedirs(out, exist_ok=True)
    h = config_hash({"cfg": cfg, "seed": seed})
    if isinstance(model, NeuralNetModel):
        rep, final, ckpts = _fit_network(model, paths, cfg, seed, h, out)
        reports = [rep]
        _write_json(os.path.join(out, "fit_report.json"), asdict(rep))
    else:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as ex:
            reports = list(ex.map(lambda p: _fit_parametric(build_model(cfg["model"]), p, cfg, seed, h), paths))
        for i, rep in enumerate(reports):
            save_checkpoint(os.path.join(out, f"checkpoint_{i:04d}.json"), model, rep.theta,
                            {"dataset": rep.dataset, "config_hash": h, "seed": seed})
        _write_json(os.path.join(out, "fit_report.json"), [asdict(r) for r in reports])
    _write_json(os.path.join(out, "resolved_config.json"),
                {"command": "fit", "config": cfg, "seed": seed, "config_hash": h})
    return reports


def _quartiles(x):
    q = np.percentile(np.asarray(x, dtype=float), [25, 50, 75])
    return {"q1": float(q[0]), "median": float(q[1]), "q3": float(q[2])}


def cmd_evaluate(cfg, out, seed=0, threads=1):
    """Tabulate grid errors of checkpoints and quartile curves of the fitted function."""
    pats = cfg.get("checkpoints", [])
    files = []
    for p in pats:
        files += sorted(glob.glob(p)) if any(ch in p for ch in "*?[") else [p]
    _require(files, "no checkpoints given")
    _require("truth" in cfg, "evaluate config needs a 'truth' model")
    truth = model_from_dict(cfg["truth"]).truth
    os.makedirs(out, exist_ok=True)
    rows = {}
    curves = []
    xs = np.linspace(0.0, 2.0, 21)
    for f in files:
        model, theta, doc = load_checkpoint(f)
        key = doc.get("epoch", "final")
        for g in MSE_GRIDS:
            rows.setdefault((key, g), []).append(mse_grid(model, theta, truth, g))
        if model.dim == 1:
            t = np.zeros(xs.size)
            curves.append(np.sqrt(model.eval(t, default_input(t, xs[:, None]), theta)[:, 0, 0]))
    lines = ["epoch,grid,q1,median,q3,count"]
    for (key, g), vals in sorted(rows.items(), key=lambda kv: str(kv[0])):
        q = _quartiles(vals)
        lines.append(f"{key},{g},{q['q1']!r},{q['median']!r},{q['q3']!r},{len(vals)}")
    with open(os.path.join(out, "mse_table.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if curves:
        arr = np.array(curves)
        q = np.percentile(arr, [25, 50, 75], axis=0)
        with open(os.path.join(out, "sqrt_sigma_quartiles.csv"), "w") as fh:
            fh.write("x,q1,median,q3,truth\n")
            for i, x in enumerate(xs):
                tr = np.sqrt(truth(np.zeros(1), np.array([[x]]))[0, 0, 0])
                fh.write(",".join(repr(float(u)) for u in (x, q[0, i], q[1, i], q[2, i], tr)) + "\n")
    if cfg.get("datasets"):
        _objective_differences(cfg, files, truth, out)
    _write_json(os.path.join(out, "resolved_config.json"),
                {"command": "evaluate", "config": cfg, "seed": seed, "config_hash": config_hash(cfg)})
    return rows


class _TruthModel(VolatilityModel):
    """Wraps a true co-volatility function as a parameter-free model."""

    n_params = 0

    def __init__(self, truth, dim):
        self.truth = truth
        self.dim = dim

    def eval(self, t, x, theta):
        return self.truth(t, np.atleast_2d(x)[:, 1:])

    def vjp(self, t, x, theta, G):
        return np.zeros(0)


def _objective_differences(cfg, files, truth, out):
    """Rows ``reference - value`` of an objective per checkpoint and data set.

    The reference is the objective at a given checkpoint (``reference_checkpoint``)
    or, by default, at the true co-volatility.
    """
    kind = cfg.get("objective", "H")
    _require(kind in OBJECTIVES, f"objective must be one of {OBJECTIVES}")
    preps = [(p, PreparedData(read_dataset(p)[0], cfg.get("n_blocks"), cfg.get("b_n"))) for p in cfg["datasets"]]
    if "reference_checkpoint" in cfg:
        ref_model, ref_theta, _ = load_checkpoint(cfg["reference_checkpoint"])
    else:
        ref_model, ref_theta = _TruthModel(truth, preps[0][1].obs.dim), np.zeros(0)
    lines = ["epoch,dataset,reference,value,difference"]
    for f in files:
        model, theta, doc = load_checkpoint(f)
        key = doc.get("epoch", "final")
        for path, prep in preps:
            ref = prep.objective(ref_model, kind)(ref_theta)[0]
            val = prep.objective(model, kind)(theta)[0]
            lines.append(f"{key},{path},{float(ref)!r},{float(val)!r},{float(ref - val)!r}")
    with open(os.path.join(out, "objective_diff.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def time_gradient(fn, theta, repeats=5):
    """Median wall-clock seconds of one objective-plus-gradient evaluation."""
    fn(theta)
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(theta)
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def cmd_bench(cfg, out, seed=0, threads=1):
    """Per-gradient timings of the three objectives and their speedup ratios."""
    if "dataset" in cfg:
        obs, _ = read_dataset(cfg["dataset"])
    else:
        rc = resolve_sim_config(cfg.get("simulate", {"preset": "cir1d-standard"}))
        pc, sc = _sim_objects(rc)
        obs = simulate_dataset(pc, sc, seed=int(seed)).obs
    model = build_model(cfg.get("model", {"family": "nn", "dim": obs.dim}))
    theta = model.init_params(np.random.default_rng(seed)) if isinstance(model, NeuralNetModel) \
        else np.asarray(cfg.get("theta", [1.0] * model.n_params), dtype=float)
    prep = PreparedData(obs, cfg.get("n_blocks"), cfg.get("b_n"))
    reps = int(cfg.get("repeats", 5))
    times = {k: time_gradient(prep.objective(model, k), theta, reps) for k in OBJECTIVES}
    report = {"timings": times, "speedup_dot_vs_H": times["H"] / times["dot"],
              "speedup_dot_vs_check": times["check"] / times["dot"], "dim": obs.dim,
              "n_blocks": prep.layout.n_blocks, "b_n": prep.layout.b_n, "seed": seed}
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "bench.json"), report)
    _write_json(os.path.join(out, "resolved_config.json"),
                {"command": "bench", "config": cfg, "seed": seed, "config_hash": config_hash(cfg)})
    return report


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    return str(o)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="qlvol", description=__doc__.splitlines()[1])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, args.out, seed=args.seed, threads=args.threads)
    except (BadConfig, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotPD, NonFinite, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK
