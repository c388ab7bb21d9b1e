"""Pipeline driver: simulate, filter, build datasets, train, roll out, score.

Every subcommand reads one config file (``--config``), draws all of its
randomness from a single root seed split into named streams, and writes a
manifest next to its artifacts recording the config snapshot, seeds, and
content hashes.  Identical config + seed give byte-identical artifacts;
only the manifest carries timestamps.

Exit codes: 0 success, 2 config error, 3 numerical failure (non-finite),
4 missing input file.
"""

import argparse
import copy
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, require, state_vector
from .dynamics import (
    DEFAULT_PARAMS,
    LorenzParams,
    Trajectory,
    check_state,
    integrate_linearized,
    integrate_ode,
    lorenz_rhs,
)
from .exceptions import (
    ClosureLabError,
    GammaSingularError,
    MissingInputError,
    NonFiniteLossError,
    NonFiniteStateError,
)
from .filtering import FilterSpec, compute_exact_sgs
from .generative import (
    GuidanceCfg,
    FlowScorePair,
    build_sgs_dataset,
    build_stab_dataset,
    closure_rollout_generative,
    stabilize_rollout_generative,
    train_pair,
)
from .manifest import RunManifest, seed_streams
from .metrics import hellinger2d, hist2d, histogram1d, shared_edges, trajectory_w1
from .neural import MlpSpec, TrainConfig
from .parametric import (
    CLOSURE_NET,
    STABILIZER_NET,
    ClosureModel,
    StabilizerModel,
    gen_pairs,
    gen_perturb,
    rollout_closure,
    rollout_stabilized,
    train_closure,
    train_stabilizer,
)
from .quadratic import build_fluct_dataset, closure_rollout_quadratic, verify_quad
from .serialize import (
    load_bundle,
    load_checkpoint,
    load_cond_dataset,
    load_pair_dataset,
    load_perturb_dataset,
    load_trajectory,
    save_bundle,
    save_checkpoint,
    save_cond_dataset,
    save_histogram,
    save_history,
    save_pair_dataset,
    save_perturb_dataset,
    save_quad_report,
    save_trajectory,
    _write_csv,
)

OUT_ENV = "CLOSURELAB_OUT"

PROJECTIONS = {"x-y": (0, 1), "x-z": (0, 2), "y-z": (1, 2)}
COORDS = "xyz"


# ---------------------------------------------------------------------------
# config helpers


def _positive(cfg, key, kind=float):
    val = require(cfg, key, (int, float) if kind is float else int)
    if val <= 0:
        raise ConfigError(f"config field '{key}' must be positive, got {val}")
    return kind(val)


def _params_from(cfg) -> LorenzParams:
    d = cfg.get("params", {})
    if not isinstance(d, dict):
        raise ConfigError("config field 'params' must be a mapping")
    unknown = set(d) - {"sigma", "r", "beta"}
    if unknown:
        raise ConfigError(f"unknown params fields: {sorted(unknown)}")
    try:
        return LorenzParams(**{k: float(v) for k, v in d.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid params: {e}")


def _guidance_from(cfg) -> GuidanceCfg:
    d = cfg.get("guidance", {})
    if not isinstance(d, dict):
        raise ConfigError("config field 'guidance' must be a mapping")
    allowed = {"w", "eta", "sigma_gamma", "d_gamma", "gamma_max", "enforce_linear_zero"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown guidance fields: {sorted(unknown)}")
    try:
        return GuidanceCfg(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid guidance: {e}")


def _input_path(cfg, key="input") -> Path:
    path = Path(require(cfg, key, str))
    if not path.is_file():
        raise MissingInputError(f"input file not found: {path}")
    return path


def _load_model(cfg, want, key="checkpoint", cond_dim=None):
    model = load_checkpoint(_input_path(cfg, key))
    if not isinstance(model, want):
        raise ConfigError(
            f"checkpoint '{cfg[key]}' holds {type(model).__name__}, "
            f"need {want.__name__}"
        )
    if cond_dim is not None:
        # flow input layout is [t | gamma | cond | null flag]
        got = model.flow.spec.in_dim - 5
        if got != cond_dim:
            raise ConfigError(
                f"checkpoint '{cfg[key]}' conditions on {got} dims, "
                f"this rollout needs {cond_dim}"
            )
    return model


def _train_cfg(cfg, seed, epochs=200, batch_size=256) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=int(cfg.get("epochs", epochs)),
            batch_size=int(cfg.get("batch_size", batch_size)),
            lr=float(cfg.get("lr", 1e-3)),
            seed=seed,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid training settings: {e}")


def _hidden(cfg, key, default):
    val = cfg.get(key, list(default))
    if not isinstance(val, list) or not all(isinstance(v, int) and v > 0 for v in val):
        raise ConfigError(f"config field '{key}' must be a list of positive ints")
    return tuple(val)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, out, seeds, man):
    name = cfg.get("name", "trajectory")
    x0 = np.array(state_vector(cfg, "x0"))
    dt = _positive(cfg, "dt")
    steps = _positive(cfg, "steps", int)
    warmup = int(cfg.get("warmup_steps", 0))
    scheme = cfg.get("scheme", "rk4")
    if scheme not in ("euler", "rk2", "rk4"):
        raise ConfigError(f"unknown scheme '{scheme}' (euler, rk2 or rk4)")
    p = _params_from(cfg)

    def rhs(x):
        return lorenz_rhs(x, p)

    if warmup > 0:
        x0 = integrate_ode(rhs, x0, dt, warmup, scheme=scheme).states[-1]
    traj = integrate_ode(rhs, x0, dt, steps, scheme=scheme)
    man.add_output(save_trajectory(traj, out / f"{name}.csv"))
    man.notes["rows"] = len(traj)
    return name


def cmd_filter(cfg, out, seeds, man):
    name = cfg.get("name", "bundle")
    path = _input_path(cfg)
    man.add_input(path)
    fine = load_trajectory(path)
    spec = FilterSpec.from_dt(fine.dt, _positive(cfg, "stride_k", int))
    bundle = compute_exact_sgs(fine, spec, _params_from(cfg))
    csv = save_bundle(bundle, out / f"{name}.csv")
    man.add_output(csv)
    man.add_output(Path(str(csv) + ".json"))
    # the filtered path doubles as the reference trajectory for cmd_metrics
    man.add_output(save_trajectory(bundle.filtered, out / f"{name}.filtered.csv"))
    man.notes["rows"] = len(bundle.filtered)
    man.notes["width_delta"] = spec.width_delta
    return name


def cmd_dataset(cfg, out, seeds, man):
    kind = require(cfg, "kind", str)
    name = cfg.get("name", kind)
    p = _params_from(cfg)
    path = _input_path(cfg)
    man.add_input(path)
    if kind == "pairs":
        fine = load_trajectory(path)
        spec = FilterSpec.from_dt(fine.dt, _positive(cfg, "stride_k", int))
        ds = gen_pairs(fine, spec, p)
        saved = save_pair_dataset(ds, out / f"{name}.csv")
    elif kind == "perturb":
        nominal = load_trajectory(path)
        ds = gen_perturb(
            nominal,
            _positive(cfg, "k_per_state", int),
            _positive(cfg, "eps"),
            p,
            seed=seeds["data"],
        )
        saved = save_perturb_dataset(ds, out / f"{name}.csv")
    elif kind in ("sgs", "fluct"):
        bundle = load_bundle(path)
        ds = build_sgs_dataset(bundle) if kind == "sgs" else build_fluct_dataset(bundle)
        saved = save_cond_dataset(ds, out / f"{name}.csv")
    elif kind == "stab":
        ds = build_stab_dataset(load_perturb_dataset(path), p)
        saved = save_cond_dataset(ds, out / f"{name}.csv")
    else:
        raise ConfigError(f"unknown dataset kind '{kind}'")
    man.add_output(saved)
    man.notes["samples"] = len(ds)
    return name


def _stages(cfg):
    stages = cfg.get("stages")
    if stages is None:
        return [cfg]
    if not isinstance(stages, list) or not all(isinstance(s, dict) for s in stages):
        raise ConfigError("config field 'stages' must be a list of mappings")
    # stage entries inherit top-level epochs/batch_size/lr unless overridden
    return [{**cfg, **s} for s in stages]


def _train_parametric(cfg, ds, seeds, trainer, default_spec):
    hidden = _hidden(cfg, "hidden", default_spec.hidden)
    spec = MlpSpec(
        in_dim=default_spec.in_dim,
        out_dim=default_spec.out_dim,
        hidden=hidden,
        activation=cfg.get("activation", default_spec.activation),
    )
    init = None
    if "init" in cfg:
        init = _load_model(cfg, (ClosureModel, StabilizerModel), key="init").net
    history = []
    model = None
    for stage in _stages(cfg):
        model = trainer(ds, spec, _train_cfg(stage, seeds["train"]), init=init)
        init = model.net
        history.extend(model.history)
    model.history = history
    return model


def cmd_train(cfg, out, seeds, man):
    family = require(cfg, "family", str)
    name = cfg.get("name", family)
    path = _input_path(cfg)
    man.add_input(path)
    p = _params_from(cfg)

    if family == "closure":
        ds = load_pair_dataset(path)
        model = _train_parametric(
            cfg, ds, seeds, lambda d, s, c, init: train_closure(d, s, c, p, init=init), CLOSURE_NET
        )
        histories = {"": model.history}
    elif family == "stabilizer":
        ds = load_perturb_dataset(path)
        model = _train_parametric(
            cfg,
            ds,
            seeds,
            lambda d, s, c, init: train_stabilizer(d, s, c, p, init=init),
            STABILIZER_NET,
        )
        histories = {"": model.history}
    elif family in ("flow", "score"):
        ds = load_cond_dataset(path)
        tc = _train_cfg(cfg, seeds["train"])
        eta = float(cfg.get("eta", 0.1))
        model = train_pair(
            ds,
            cfg_flow=tc,
            cfg_score=tc,
            eta_flow=eta,
            eta_score=float(cfg.get("eta_score", eta)),
            hidden_flow=_hidden(cfg, "hidden", (128, 128)),
            hidden_score=_hidden(cfg, "hidden_score", (128,) * 4),
            with_score=(family == "score"),
        )
        histories = {".flow": model.flow_history}
        if family == "score":
            histories[".score"] = model.score_history
    else:
        raise ConfigError(f"unknown train family '{family}'")

    man.add_output(save_checkpoint(model, out / f"{name}.json"))
    for suffix, hist in histories.items():
        man.add_output(save_history(hist, out / f"{name}{suffix}.history.csv"))
        man.notes[f"final_loss{suffix}"] = hist[-1] if hist else None
    return name


def _euler_rollout(rhs, x0, dt, n) -> Trajectory:
    x = check_state(x0, name="x0")
    states = np.empty((n + 1, 3))
    states[0] = x
    kept, blew_up = n + 1, False
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            x = x + dt * rhs(x)
            if not np.all(np.isfinite(x)):
                kept, blew_up = k + 1, True
                break
            states[k + 1] = x
    return Trajectory(dt=dt, t0=0.0, states=states[:kept], blew_up=blew_up)


def cmd_rollout(cfg, out, seeds, man):
    method = require(cfg, "method", str)
    name = cfg.get("name", "rollout")
    p = _params_from(cfg)
    seed = seeds["sample"]
    recon = None

    if method in ("fe", "rk"):
        x0 = np.array(state_vector(cfg, "x0"))
        dt = _positive(cfg, "dt")
        steps = _positive(cfg, "steps", int)

        def rhs(x):
            return lorenz_rhs(x, p)

        if method == "fe":
            traj = _euler_rollout(rhs, x0, dt, steps)
        else:
            traj = integrate_ode(rhs, x0, dt, steps, scheme=cfg.get("scheme", "rk4"))
    elif method in ("em-parametric", "generative", "quadratic"):
        x0 = np.array(state_vector(cfg, "x0"))
        h = _positive(cfg, "h")
        steps = _positive(cfg, "steps", int)
        if method == "em-parametric":
            model = _load_model(cfg, ClosureModel)
            man.add_input(Path(cfg["checkpoint"]))
            traj = rollout_closure(model, x0, h, steps, p, seed=seed)
        else:
            pair = _load_model(cfg, FlowScorePair, cond_dim=3)
            man.add_input(Path(cfg["checkpoint"]))
            gcfg = _guidance_from(cfg)
            if method == "generative":
                traj = closure_rollout_generative(pair, x0, h, steps, p, gcfg, seed=seed)
            else:
                delta = _positive(cfg, "delta")
                traj = closure_rollout_quadratic(pair, x0, h, steps, delta, p, gcfg, seed=seed)
    elif method in ("linearized", "stabilized-parametric", "stabilized-generative"):
        nominal_path = _input_path(cfg, "nominal")
        man.add_input(nominal_path)
        nominal = load_trajectory(nominal_path)
        xt0 = np.array(state_vector(cfg, "xt0"))
        if method == "linearized":
            traj = integrate_linearized(nominal, xt0, p)
        elif method == "stabilized-parametric":
            model = _load_model(cfg, StabilizerModel)
            man.add_input(Path(cfg["checkpoint"]))
            traj, recon = rollout_stabilized(model, nominal, xt0, p, seed=seed)
        else:
            pair = _load_model(cfg, FlowScorePair, cond_dim=6)
            man.add_input(Path(cfg["checkpoint"]))
            traj, recon = stabilize_rollout_generative(
                pair, nominal, xt0, p, _guidance_from(cfg), seed=seed
            )
    else:
        raise ConfigError(f"unknown rollout method '{method}'")

    man.add_output(save_trajectory(traj, out / f"{name}.csv"))
    if recon is not None:
        man.add_output(save_trajectory(recon, out / f"{name}.recon.csv"))
    man.notes["blew_up"] = bool(traj.blew_up)
    man.notes["rows"] = len(traj)
    return name


def cmd_metrics(cfg, out, seeds, man):
    name = cfg.get("name", "metrics")
    ref_path = _input_path(cfg, "reference")
    man.add_input(ref_path)
    ref = load_trajectory(ref_path)

    entries = require(cfg, "candidates", list)
    if not entries:
        raise ConfigError("config field 'candidates' must name at least one file")
    candidates = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"path": entry}
        if not isinstance(entry, dict) or "path" not in entry:
            raise ConfigError("each candidate must be a path or a {name, path} mapping")
        path = Path(entry["path"])
        if not path.is_file():
            raise MissingInputError(f"input file not found: {path}")
        man.add_input(path)
        candidates.append((entry.get("name", path.stem), load_trajectory(path)))

    bins = int(cfg.get("bins", 50))
    baseline = cfg.get("baseline", candidates[0][0])
    names = [nm for nm, _ in candidates]
    if baseline not in names:
        raise ConfigError(f"baseline '{baseline}' is not among candidates {names}")

    w1 = {nm: trajectory_w1(ref, tr) for nm, tr in candidates}
    hell = {
        nm: [hellinger2d(ref, tr, axes=ax, bins=bins) for ax in PROJECTIONS.values()]
        for nm, tr in candidates
    }

    records = []
    for nm, _ in candidates:
        for j, coord in enumerate(COORDS):
            records.append(
                {"method": nm, "metric": "w1", "coordinate": coord, "value": float(w1[nm][j])}
            )
        for axes, val in zip(PROJECTIONS, hell[nm]):
            records.append({"method": nm, "metric": "hellinger", "axes": axes, "value": val})
    report = {"reference": str(ref_path), "baseline": baseline, "records": records}
    json_path = out / f"{name}.json"
    json_path.write_text(_dumps(report))
    man.add_output(json_path)

    # one table per metric family: methods as rows, beats_baseline verdict column
    def table(path, header, values):
        rows = [
            f"{nm}," + ",".join(f"{v:.17g}" for v in values[nm]) + ","
            + str(bool(np.all(np.asarray(values[nm]) < np.asarray(values[baseline]))))
            for nm, _ in candidates
        ]
        path.write_text("\n".join([header] + rows) + "\n")
        man.add_output(path)

    table(out / f"{name}.w1.csv", "method,w1_x,w1_y,w1_z,beats_baseline", w1)
    table(out / f"{name}.hellinger.csv", "method,h_xy,h_xz,h_yz,beats_baseline", hell)
    return name


def cmd_report(cfg, out, seeds, man):
    name = cfg.get("name", "report")
    rdir = out / name
    rdir.mkdir(parents=True, exist_ok=True)
    p = _params_from(cfg)
    bins = int(cfg.get("bins", 50))
    wrote = False

    if "bundle" in cfg:
        path = _input_path(cfg, "bundle")
        man.add_input(path)
        b = load_bundle(path)
        t = b.filtered.times[:, None]
        mat = np.hstack(
            [t, b.fine.states, b.filtered.states, b.fluctuations.states, b.exact_tau.states]
        )
        header = "t," + ",".join(
            [*COORDS]
            + [f"xbar_{c}" for c in COORDS]
            + [f"xprime_{c}" for c in COORDS]
            + [f"tau_{c}" for c in COORDS]
        )
        man.add_output(_write_csv(rdir / "series.csv", header, mat))
        wrote = True

    for entry in cfg.get("histograms", []):
        if isinstance(entry, str):
            entry = {"path": entry}
        path = _input_path(entry, "path")
        man.add_input(path)
        traj = load_trajectory(path)
        nm = entry.get("name", path.stem)
        for j, coord in enumerate(COORDS):
            mass, edges = histogram1d(traj.states[:, j], bins)
            man.add_output(save_histogram(mass, edges, rdir / f"{nm}.hist_{coord}.csv"))
        wrote = True

    for entry in cfg.get("projections", []):
        if isinstance(entry, str):
            entry = {"path": entry}
        path = _input_path(entry, "path")
        man.add_input(path)
        traj = load_trajectory(path)
        nm = entry.get("name", path.stem)
        for axes, (i, j) in PROJECTIONS.items():
            u, v = traj.states[:, i], traj.states[:, j]
            h = hist2d(u, v, shared_edges(u, u, bins), shared_edges(v, v, bins))
            xl, xr = np.meshgrid(h.xedges[:-1], h.yedges[:-1], indexing="ij")
            xh, yh = np.meshgrid(h.xedges[1:], h.yedges[1:], indexing="ij")
            mat = np.column_stack(
                [xl.ravel(), xh.ravel(), xr.ravel(), yh.ravel(), h.mass.ravel()]
            )
            man.add_output(
                _write_csv(rdir / f"{nm}.proj_{axes}.csv", "xlo,xhi,ylo,yhi,mass", mat)
            )
        wrote = True

    if "quad" in cfg:
        sub = require(cfg, "quad", dict)
        path = _input_path(sub, "bundle")
        man.add_input(path)
        report = verify_quad(load_bundle(path), p)
        csv = save_quad_report(report, rdir / "quad.csv")
        man.add_output(csv)
        man.add_output(Path(str(csv) + ".json"))
        wrote = True

    if not wrote:
        raise ConfigError("report config names no artifacts (bundle/histograms/projections/quad)")
    return name


def _dumps(obj):
    import json

    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "metrics": cmd_metrics,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="closurelab",
        description="Stochastic closure modeling pipeline for chaotic ODEs.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd, help=f"run the {cmd} stage")
        sp.add_argument("--config", required=True, help="config file (YAML, supports include:)")
        sp.add_argument("--seed", type=int, default=None, help="override the config root seed")
        sp.add_argument("--out", default=None, help="output directory (default: $CLOSURELAB_OUT or .)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        root_seed = cfg.get("seed", 0)
        if not isinstance(root_seed, int):
            raise ConfigError(f"config field 'seed' must be an int, got {root_seed!r}")
        out = Path(args.out or cfg.get("out") or os.environ.get(OUT_ENV) or ".")
        out.mkdir(parents=True, exist_ok=True)
        seeds = seed_streams(root_seed)
        man = RunManifest(
            command=args.command,
            config=copy.deepcopy(cfg),
            seeds={"root": root_seed, **seeds},
        )
        name = COMMANDS[args.command](cfg, out, seeds, man)
        man_path = man.write(out / f"{name}.manifest.json")
        for path in man.outputs:
            print(f"wrote {path}")
        print(f"wrote {man_path}")
        return 0
    except ConfigError as e:
        return _fail(2, e)
    except NonFiniteLossError as e:
        return _fail(3, f"{e} (after {len(e.history)} finite epochs)")
    except (NonFiniteStateError, GammaSingularError) as e:
        return _fail(3, e)
    except (MissingInputError, FileNotFoundError) as e:
        return _fail(4, e)
    except (ClosureLabError, ValueError) as e:
        return _fail(2, e)


def _fail(code, err) -> int:
    print(f"error: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
