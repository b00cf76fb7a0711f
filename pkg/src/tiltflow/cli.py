"""Experiment runner: ``tiltflow <command> [--config file.json] [--set key=value]``.

Commands: gen-world, train-flow, train-cost, optimize, generate, check,
evaluate. Outputs go to ``--out``, else ``$TF_OUT_DIR``, else ./runs.
"""
import argparse
import copy
import csv
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from . import costmodel as cm
from . import field2d as f2
from . import flow as fl
from . import guide as gd
from . import optimize as opt
from . import oracle as orc
from . import secant as sec
from .rng import substream
from .schedule import Schedule

DEFAULTS = {
    "seed": 0,
    "world": {"density_kind": "grf-potential", "cost_kind": "grf", "length_scale": 0.7,
              "field_std": 1.0, "density_scale": 1.5, "cost_length_scale": 0.9,
              "n_rbf": 8, "nx": 256, "ny": 256},
    "eval_grid": 125,
    "lam_list": [1.0, 10.0, 100.0],
    "flow": {"hidden": [128, 128, 128], "activation": "tanh", "n_freq": 6,
             "n_steps": 6000, "batch_size": 512, "step_size": 2e-3,
             "final_step_size": 1e-4, "eps_t": 1e-3},
    "cost": {"loss_kind": "skl", "hidden": [64, 64], "activation": "softplus",
             "n_steps": 3000, "batch_size": 256, "step_size": 2e-3,
             "lam_range": [0.1, 100.0], "lam_eval": [1.0, 10.0, 100.0],
             "eval_interval": 100, "stop_gradient": False},
    "optimize": {"n_starts": 100, "n_iter": 300, "step_size": 0.02, "lam": 1.0,
                 "t_max": 0.98, "t_min_start": 0.02, "t_min_end": 0.5, "n_t_samples": 1},
    "guidance": {"methods": ["none", "dps", "lgd_mc", "sim_mc", "sa_mc"],
                 "n_samples": 32, "memory": 8, "sigma2": 0.2, "sigma3": 1.0,
                 "antithetic": False, "cost_source": "ground-truth"},
    "ode": {"n_steps": 100, "integrator": "euler", "t_end": 0.98, "final_jump": True},
    "n_samples": 20000,
    "chunk_size": 4096,
    "threads": 1,
}


# -- config ------------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, items):
    cfg = copy.deepcopy(cfg)
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    cfg = apply_overrides(cfg, overrides)
    if cfg.get("seed") is None:
        raise ValueError("config needs a seed")
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# -- run manifest ----------------------------------------------------------

class RunManifest:
    def __init__(self, out_dir, cfg, command):
        self.out_dir = out_dir
        self.data = {"command": command, "config_hash": config_hash(cfg),
                     "versions": _versions(), "phases": {}, "artifacts": []}
        self._t = None

    def phase(self, name):
        manifest = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                manifest.data["phases"][name] = time.perf_counter() - self.t0

        return _Timer()

    def add(self, path):
        rel = os.path.relpath(path, self.out_dir)
        if rel not in self.data["artifacts"]:
            self.data["artifacts"].append(rel)
        return path

    def write(self):
        path = os.path.join(self.out_dir, f"manifest_{self.data['command']}.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path


def _versions():
    import scipy
    import sklearn

    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__,
            "tiltflow": __version__}


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
    os.replace(tmp, path)


def _write_points(path, X):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y"])
        for a, b in X:
            w.writerow([repr(float(a)), repr(float(b))])


def _read_points(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _lam_tag(lam):
    return f"{float(lam):g}"


# -- world -----------------------------------------------------------------

def world_spec(cfg):
    w = dict(cfg["world"])
    geom = f2.Geometry(nx=int(w.pop("nx")), ny=int(w.pop("ny")))
    if "rbf_width" in w:
        w["rbf_width"] = tuple(w["rbf_width"])
    return f2.WorldSpec(seed=int(cfg["seed"]), geometry=geom, **w)


def build_world(cfg):
    spec = world_spec(cfg)
    p = f2.pmf_from_logits(spec.geometry, f2.data_log_potential(spec).values)
    return spec, p, f2.make_cost(spec)


def eval_geometry(cfg, p):
    n = int(cfg["eval_grid"])
    return p.geometry.with_resolution(n, n)


def resample_pmf(p, geometry):
    logits = f2.GridField(p.geometry, p.log_mass()).resample(geometry)
    return f2.pmf_from_logits(geometry, logits.values)


def q_star(p, cost, lam, geometry=None):
    if geometry is not None:
        p = resample_pmf(p, geometry)
        cost = cost.resample(geometry)
    return f2.tilt(p, cost, lam)


def _world_files(out):
    return os.path.join(out, "p.pmf"), os.path.join(out, "cost.field")


def load_world(cfg, out):
    pp, cp = _world_files(out)
    if os.path.exists(pp) and os.path.exists(cp):
        return f2.load(pp), f2.load(cp)
    _, p, cost = build_world(cfg)
    return p, cost


def cmd_gen_world(cfg, out, man):
    with man.phase("gen-world"):
        _, p, cost = build_world(cfg)
        pp, cp = _world_files(out)
        f2.save(p, man.add(pp))
        f2.save(cost, man.add(cp))
        f2.save_pgm(p, man.add(os.path.join(out, "p.pgm")))
        f2.save_pgm(cost, man.add(os.path.join(out, "cost.pgm")))
        for lam in cfg["lam_list"]:
            q = f2.tilt(p, cost, float(lam))
            f2.save(q, man.add(os.path.join(out, f"q_star_lam{_lam_tag(lam)}.pmf")))
            f2.save_pgm(q, man.add(os.path.join(out, f"q_star_lam{_lam_tag(lam)}.pgm")))
    return 0


# -- training --------------------------------------------------------------

def train_flow_model(cfg, p):
    fc = cfg["flow"]
    model = fl.VelocityModel.create(tuple(fc["hidden"]), fc["activation"],
                                    seed=substream(cfg["seed"], "flow.init"),
                                    n_freq=int(fc["n_freq"]), sched=Schedule(eps_t=fc["eps_t"]))
    tc = fl.FlowTrainConfig(int(fc["n_steps"]), int(fc["batch_size"]), fc["step_size"],
                            fc["final_step_size"], seed=int(cfg["seed"]))
    return fl.train_flow(model, p, tc)


def cmd_train_flow(cfg, out, man):
    p, _ = load_world(cfg, out)
    with man.phase("train-flow"):
        model, history = train_flow_model(cfg, p)
    path = man.add(os.path.join(out, "flow.tfvm"))
    with open(path, "wb") as fh:
        fh.write(model.to_bytes())
    with open(man.add(os.path.join(out, "flow_history.csv")), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(v)])
    return 0


def load_flow(out):
    with open(os.path.join(out, "flow.tfvm"), "rb") as fh:
        return fl.VelocityModel.from_bytes(fh.read())


def cmd_train_cost(cfg, out, man):
    p, cost = load_world(cfg, out)
    cc = cfg["cost"]
    model = cm.CostPredictor.create(tuple(cc["hidden"]), cc["activation"],
                                    seed=substream(cfg["seed"], "cost.init"),
                                    lam_range=tuple(cc["lam_range"]))
    tc = cm.CostTrainConfig(cc["loss_kind"], int(cc["n_steps"]), int(cc["batch_size"]),
                            cc["step_size"], tuple(cc["lam_range"]), tuple(cc["lam_eval"]),
                            int(cc["eval_interval"]), bool(cc["stop_gradient"]),
                            int(cfg["seed"]))
    with man.phase("train-cost"):
        res = cm.train_cost(model, p, cost, tc)
    for name, m in (("cost_best.tfcp", res.best), ("cost_last.tfcp", res.last)):
        with open(man.add(os.path.join(out, name)), "wb") as fh:
            fh.write(m.to_bytes())
    cm.write_metric_csv(res.history, man.add(os.path.join(out, "cost_metrics.csv")))
    with open(man.add(os.path.join(out, "cost_losses.csv")), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(res.losses):
            w.writerow([i, repr(v)])
    return 0


def cost_oracle(cfg, out, cost_field):
    if cfg["guidance"].get("cost_source", "ground-truth") == "ground-truth":
        return cm.GridCost(cost_field)
    with open(os.path.join(out, "cost_best.tfcp"), "rb") as fh:
        return LambdaScaled(cm.CostPredictor.from_bytes(fh.read()))


class LambdaScaled:
    """Adapts a predictor (which already folds in lambda) to the oracle call."""

    def __init__(self, model):
        self.model = model

    def value(self, X, lam):
        return self.model.value(X, lam)

    def grad(self, X, lam):
        return self.model.grad(X, lam)


# -- optimize --------------------------------------------------------------

def run_optimize(cfg, flow, p, cost_field):
    oc = cfg["optimize"]
    starts = f2.sample(p, int(oc["n_starts"]), substream(cfg["seed"], "optimize.starts"))
    acfg = opt.AnnealConfig(int(oc["n_iter"]), oc["step_size"], oc["t_max"], oc["t_min_start"],
                            oc["t_min_end"], oc["lam"], int(oc["n_t_samples"]), int(cfg["seed"]))
    nlp_field = f2.log_density_field(p)
    neg_log_p = lambda X: -f2.interp(nlp_field, X)
    cost = cm.GridCost(cost_field)
    dens = opt.optimize_point(starts, cost, flow, acfg, neg_log_p)
    base = opt.optimize_cost_only(starts, cost, acfg, neg_log_p)
    return starts, dens, base


def _summ(tr):
    J0, J1 = tr.cost[0], tr.cost[-1]
    n0, n1 = tr.neg_log_p[0], tr.neg_log_p[-1]
    return {"initial_mean_cost": float(J0.mean()), "final_mean_cost": float(J1.mean()),
            "initial_mean_neg_log_p": float(n0.mean()), "final_mean_neg_log_p": float(n1.mean()),
            "delta_neg_log_p_se": float((n1 - n0).std(ddof=1) / np.sqrt(len(n0)))}


def _trace_means_csv(tr, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "mean_cost", "mean_neg_log_p", "mean_grad_norm"])
        for k in range(len(tr)):
            w.writerow([k, repr(tr.t[k]), repr(float(tr.cost[k].mean())),
                        repr(float(tr.neg_log_p[k].mean())), repr(float(tr.grad_norm[k].mean()))])


def cmd_optimize(cfg, out, man):
    p, cost_field = load_world(cfg, out)
    flow = load_flow(out)
    with man.phase("optimize"):
        _, dens, base = run_optimize(cfg, flow, p, cost_field)
    _trace_means_csv(dens, man.add(os.path.join(out, "opt_density.csv")))
    _trace_means_csv(base, man.add(os.path.join(out, "opt_baseline.csv")))
    dens.to_csv(man.add(os.path.join(out, "opt_density_start0.csv")))
    summary = {"density_gradient": _summ(dens), "cost_gradient": _summ(base),
               "lam": cfg["optimize"]["lam"], "n_starts": cfg["optimize"]["n_starts"]}
    _write_json(man.add(os.path.join(out, "optimize_summary.json")), summary)
    return 0


# -- generate --------------------------------------------------------------

def method_from_cfg(cfg, name):
    g = cfg["guidance"]
    return gd.GuidanceMethod(name, int(g["n_samples"]), memory=int(g["memory"]),
                             sigma2=g["sigma2"], sigma3=g["sigma3"],
                             antithetic=bool(g["antithetic"]))


def ode_from_cfg(cfg):
    o = cfg["ode"]
    return fl.OdeConfig(int(o["n_steps"]), o["integrator"], t_end=o["t_end"],
                        final_jump=bool(o["final_jump"]))


def generate_points(flow, cost, method, lam, n, ode, seed, tag, chunk_size=4096, threads=1):
    """Chunked generation; chunk c always uses substream (seed, tag, c), so the
    output does not depend on the thread count."""
    n = int(n)
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def run(ci):
        a, b = bounds[ci]
        rng = substream(seed, tag, ci)
        x, _, guid = gd.guided_sample(flow, cost, method, lam, b - a, ode, rng)
        return x, guid

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, range(len(bounds))))
    else:
        results = [run(ci) for ci in range(len(bounds))]
    return np.concatenate([r[0] for r in results]), [r[1] for r in results]


def cmd_generate(cfg, out, man):
    p, cost_field = load_world(cfg, out)
    flow = load_flow(out)
    cost = cost_oracle(cfg, out, cost_field)
    ode = ode_from_cfg(cfg)
    geom = eval_geometry(cfg, p)
    summary = {}
    for lam in cfg["lam_list"]:
        q = q_star(p, cost_field, float(lam), geom)
        for name in cfg["guidance"]["methods"]:
            method = method_from_cfg(cfg, name)
            tag = f"generate.lam{_lam_tag(lam)}"
            with man.phase(f"generate.{name}.lam{_lam_tag(lam)}"):
                X, _ = generate_points(flow, cost, method, float(lam), cfg["n_samples"], ode,
                                       int(cfg["seed"]), tag, int(cfg["chunk_size"]),
                                       int(cfg.get("threads", 1)))
            stem = f"samples_{name}_lam{_lam_tag(lam)}"
            _write_points(man.add(os.path.join(out, stem + ".csv")), X)
            h = f2.histogram(X, geom)
            f2.save(h, man.add(os.path.join(out, stem + ".hist")))
            summary.setdefault(_lam_tag(lam), {})[name] = {"kl_hist_qstar": f2.kl(h, q)}
    _write_json(man.add(os.path.join(out, "generate_summary.json")), summary)
    return 0


def cmd_evaluate(cfg, out, man):
    p, cost_field = load_world(cfg, out)
    geom = eval_geometry(cfg, p)
    report = {}
    for fn in sorted(os.listdir(out)):
        if not (fn.startswith("samples_") and fn.endswith(".csv")):
            continue
        stem = fn[:-4]
        lam = float(stem.rsplit("_lam", 1)[1])
        X = _read_points(os.path.join(out, fn))
        h = f2.histogram(X, geom)
        q = q_star(p, cost_field, lam, geom)
        report[stem] = {"lam": lam, "n": int(len(X)), "kl_hist_qstar": f2.kl(h, q),
                        "mean_cost": float(f2.interp(cost_field, X).mean())}
    _write_json(man.add(os.path.join(out, "evaluation.json")), report)
    return 0


# -- check -----------------------------------------------------------------

def run_checks(seed=0):
    """Identity and convention checks on synthetic instances; returns a report dict."""
    rng = substream(seed, "check")
    rep = {}
    sched = Schedule()

    # compact vs dense recursion
    worst = 0.0
    for _ in range(20):
        d, K = 16, 20
        ts = np.sort(rng.uniform(0.02, 0.95, K + 1))
        q = sec.MemoryQueue(K)
        B = sec.CompactB.identity(1.0, d, 1)
        pairs = []
        for k in range(K):
            s = rng.standard_normal(d)
            y = rng.standard_normal(d)
            yh, _, _ = sec.damp(y, s, B)
            c = sched.step_coeffs(ts[k], ts[k + 1])
            q.push(sec.SecantPair(s, yh, c.u, c.w))
            pairs.append((s, yh, c.u, c.w))
            B = sec.update_B(q, 1.0)
        D = orc.dense_B_recursion(pairs, 1.0, d)
        worst = max(worst, np.linalg.norm(B.dense()[0] - D) / np.linalg.norm(D))
    rep["compact_dense_equivalence"] = {"max_rel_err": worst, "passed": worst <= 1e-10}

    # factorization
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 65))
        m = int(rng.integers(1, 17))
        U = rng.standard_normal((d, m))
        G = rng.standard_normal((m, m))
        G = 0.3 * (G @ G.T) / m
        Bc = sec.CompactB.single(rng.uniform(0.5, 2.0), U, G)
        F = sec.semi_numerical_sqrt(Bc)
        L = sec.apply_L(F, np.eye(d)[None])[0].T
        D = Bc.dense()[0]
        worst = max(worst, np.linalg.norm(L @ L.T - D) / np.linalg.norm(D))
    rep["sqrt_factorization"] = {"max_rel_err": worst, "passed": worst <= 1e-8}

    # secant condition and curvature band on an analytic-world SA-MC run
    world = orc.GaussianWorld(np.diag([2.0, 0.5]))
    g = gd.SAMCGuidance(world, cm.QuadraticCost(np.eye(2), np.array([1.0, 0.0])), 1.0,
                        gd.GuidanceMethod("sa_mc", 16), rng, 64)
    fl.integrate(world, rng.standard_normal((64, 2)), fl.OdeConfig(50, final_jump=False), g)
    rep["secant_and_band"] = {"max_secant_residual": g.max_secant_residual,
                              "min_band_margin": g.min_band_margin,
                              "fallbacks": g.n_fallback,
                              "passed": g.max_secant_residual <= 1e-8
                              and g.min_band_margin >= -1e-12 and g.n_fallback == 0}

    # score convention
    w1 = orc.GaussianWorld()
    worst = 0.0
    for t in np.linspace(0.1, 0.9, 5):
        xs = np.stack(np.meshgrid(np.linspace(-2, 2, 9), np.linspace(-2, 2, 9)), -1).reshape(-1, 2)
        sc = sched.score_from_velocity(xs, w1.velocity(xs, t), t)
        worst = max(worst, np.abs(sc - w1.score(xs, t)).max())
    rep["score_sign"] = {"max_abs_err": worst, "passed": worst <= 1e-8}

    # LGD/SIM gap vs covariance-mismatch bound
    reports = []
    for _ in range(10):
        A = rng.standard_normal((2, 2))
        wd = orc.GaussianWorld(A @ A.T + 0.3 * np.eye(2), 0.5 * rng.standard_normal(2))
        t = float(rng.uniform(0.2, 0.8))
        x = rng.standard_normal(2)
        Q = rng.standard_normal((2, 2))
        qc = cm.QuadraticCost(Q @ Q.T + 0.2 * np.eye(2), rng.standard_normal(2))
        lam = float(rng.uniform(0.2, 1.5))
        Sig = sched.guidance_std(t) ** 2 * np.eye(2)
        reports.append(orc.check_theorem2(wd, x, t, Sig, lambda X: qc.value(X, lam)))
    rep["theorem2_bound"] = {"reports": [json.loads(r.to_json()) for r in reports],
                             "passed": all(r.passed for r in reports)}

    # small-lambda SKL law
    spec = f2.WorldSpec(seed=seed, geometry=f2.Geometry(nx=128, ny=128))
    p = f2.density_from_potential(f2.make_grf(spec), spec.density_scale)
    C = f2.make_cost(spec)
    lam = 1e-3
    ratios = []
    for i in range(5):
        delta = f2.make_grf(spec, 0.5 + 0.2 * i, tag=f"check.delta{i}").values * 0.5
        r = cm.skl_objective(p, lam * C.values, lam * (C.values + delta))
        ratios.append(r / (lam ** 2 * cm.variance_p(p, delta)))
    rep["skl_small_lambda"] = {"ratios": ratios,
                               "passed": all(0.95 <= r <= 1.05 for r in ratios)}
    rep["passed"] = all(v["passed"] for v in rep.values())
    return rep


def cmd_check(cfg, out, man):
    with man.phase("check"):
        rep = run_checks(int(cfg["seed"]))
    _write_json(man.add(os.path.join(out, "check_report.json")), rep)
    with open(man.add(os.path.join(out, "theorem2_bounds.jsonl")), "w") as fh:
        for r in rep["theorem2_bound"]["reports"]:
            fh.write(json.dumps(r, sort_keys=True, default=_jsonable) + "\n")
    for k, v in rep.items():
        if k != "passed":
            print(f"{k}: {'PASS' if v['passed'] else 'FAIL'}")
    return 0 if rep["passed"] else 1


COMMANDS = {"gen-world": cmd_gen_world, "train-flow": cmd_train_flow,
            "train-cost": cmd_train_cost, "optimize": cmd_optimize,
            "generate": cmd_generate, "check": cmd_check, "evaluate": cmd_evaluate}


def build_parser():
    ap = argparse.ArgumentParser(prog="tiltflow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry (dotted keys allowed)")
    ap.add_argument("--out", help="output directory (default $TF_OUT_DIR or ./runs)")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads for trajectory chunks (default from config)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.threads is not None:
        cfg["threads"] = args.threads
    out = args.out or os.environ.get("TF_OUT_DIR") or "runs"
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out}: {exc}", file=sys.stderr)
        return 2
    man = RunManifest(out, cfg, args.command)
    _write_json(man.add(os.path.join(out, f"config_{args.command}.json")), cfg)
    try:
        with threadpool_limits(limits=1):
            code = COMMANDS[args.command](cfg, out, man)
    except OSError as exc:
        print(f"I/O error on {getattr(exc, 'filename', '?')}: {exc}", file=sys.stderr)
        return 2
    man.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
