"""CSV and JSON persistence for trajectories, datasets, models, and reports.

CSVs carry full double precision (17 significant digits) so save/load
round-trips are exact; checkpoints are JSON with decimal parameter arrays
for the same reason.
"""

import json
from pathlib import Path

import numpy as np

from .filtering import FilterSpec, FilteredBundle
from .generative import CondDataset, FlowScorePair
from .dynamics import Trajectory
from .neural import MlpModel, MlpSpec
from .parametric import ClosureModel, PairDataset, PerturbDataset, StabilizerModel
from .quadratic import QuadReport

CHECKPOINT_FORMAT = "closurelab-checkpoint"
CHECKPOINT_VERSION = 1


def _write_csv(path, header, matrix) -> Path:
    path = Path(path)
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    np.savetxt(path, matrix, fmt="%.17g", delimiter=",", header=header, comments="")
    return path


def _read_csv(path, expect_cols=None):
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if expect_cols is not None and header != expect_cols:
        raise ValueError(f"{path}: expected columns {expect_cols}, found {header}")
    return header, data


def save_trajectory(traj: Trajectory, path) -> Path:
    path = Path(path)
    t = traj.t0 + traj.dt * np.arange(len(traj.states))
    _write_csv(path, "t,x,y,z", np.column_stack([t, traj.states]))
    return path


def load_trajectory(path, dt=None, blew_up=False) -> Trajectory:
    _, data = _read_csv(path, ["t", "x", "y", "z"])
    if dt is None:
        if len(data) < 2:
            raise ValueError(f"{path}: need at least 2 rows to infer dt; pass dt explicitly")
        dt = float(data[1, 0] - data[0, 0])
    return Trajectory(dt=dt, t0=float(data[0, 0]), states=data[:, 1:4].copy(), blew_up=blew_up)


_BUNDLE_COLS = (
    "t,x,y,z,xbar_x,xbar_y,xbar_z,xprime_x,xprime_y,xprime_z,tau_x,tau_y,tau_z"
)


def save_bundle(bundle: FilteredBundle, path) -> Path:
    """Aligned series in one CSV plus a JSON sidecar with the grid metadata."""
    path = Path(path)
    fine = bundle.fine
    t = fine.t0 + fine.dt * np.arange(len(fine.states))
    _write_csv(
        path,
        _BUNDLE_COLS,
        np.column_stack(
            [t, fine.states, bundle.filtered.states, bundle.fluctuations.states, bundle.exact_tau.states]
        ),
    )
    sidecar = {
        "width_delta": bundle.spec.width_delta,
        "stride_k": bundle.spec.stride_k,
        "offset": bundle.offset,
        "dt": fine.dt,
        "t0": fine.t0,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_bundle(path) -> FilteredBundle:
    path = Path(path)
    _, data = _read_csv(path, _BUNDLE_COLS.split(","))
    meta = json.loads(Path(str(path) + ".json").read_text())
    spec = FilterSpec(width_delta=meta["width_delta"], stride_k=meta["stride_k"])

    def traj(cols):
        return Trajectory(dt=meta["dt"], t0=meta["t0"], states=data[:, cols].copy())

    return FilteredBundle(
        fine=traj(slice(1, 4)),
        filtered=traj(slice(4, 7)),
        fluctuations=traj(slice(7, 10)),
        exact_tau=traj(slice(10, 13)),
        spec=spec,
        offset=meta["offset"],
    )


_PAIR_COLS = "xbar0_x,xbar0_y,xbar0_z,xbarh_x,xbarh_y,xbarh_z,h"


def save_pair_dataset(ds: PairDataset, path) -> Path:
    path = Path(path)
    h = np.full(len(ds.xbar0), ds.h)
    _write_csv(path, _PAIR_COLS, np.column_stack([ds.xbar0, ds.xbarh, h]))
    return path


def load_pair_dataset(path) -> PairDataset:
    _, data = _read_csv(path, _PAIR_COLS.split(","))
    h = data[:, 6]
    if not np.all(h == h[0]):
        raise ValueError(f"{path}: h column must be constant")
    return PairDataset(xbar0=data[:, 0:3].copy(), xbarh=data[:, 3:6].copy(), h=float(h[0]))


_PERTURB_COLS = "xn_x,xn_y,xn_z,xt0_x,xt0_y,xt0_z,xt1_x,xt1_y,xt1_z,dt"


def save_perturb_dataset(ds: PerturbDataset, path) -> Path:
    path = Path(path)
    dt = np.full(len(ds.xn), ds.dt)
    _write_csv(path, _PERTURB_COLS, np.column_stack([ds.xn, ds.xt0, ds.xt1, dt]))
    return path


def load_perturb_dataset(path) -> PerturbDataset:
    _, data = _read_csv(path, _PERTURB_COLS.split(","))
    dt = data[:, 9]
    if not np.all(dt == dt[0]):
        raise ValueError(f"{path}: dt column must be constant")
    return PerturbDataset(
        xn=data[:, 0:3].copy(), xt0=data[:, 3:6].copy(), xt1=data[:, 6:9].copy(), dt=float(dt[0])
    )


def save_cond_dataset(ds: CondDataset, path) -> Path:
    path = Path(path)
    cond_cols = ",".join(f"cond_{i}" for i in range(ds.cond.shape[1]))
    _write_csv(path, f"tau_x,tau_y,tau_z,{cond_cols}", np.column_stack([ds.target, ds.cond]))
    return path


def load_cond_dataset(path) -> CondDataset:
    header, data = _read_csv(path)
    if header[:3] != ["tau_x", "tau_y", "tau_z"] or len(header) < 4:
        raise ValueError(f"{path}: expected tau_x,tau_y,tau_z,cond_* columns, found {header}")
    return CondDataset(target=data[:, 0:3].copy(), cond=data[:, 3:].copy())


def _mlp_to_dict(model: MlpModel) -> dict:
    s = model.spec
    return {
        "in_dim": s.in_dim,
        "out_dim": s.out_dim,
        "hidden": list(s.hidden),
        "activation": s.activation,
        "residual": s.residual,
        "params": model.params.tolist(),
    }


def _mlp_from_dict(d: dict) -> MlpModel:
    spec = MlpSpec(
        in_dim=d["in_dim"],
        out_dim=d["out_dim"],
        hidden=tuple(d["hidden"]),
        activation=d["activation"],
        residual=d.get("residual", False),
    )
    return MlpModel(spec=spec, params=np.asarray(d["params"], dtype=np.float64))


def _scale_to_json(v):
    arr = np.asarray(v)
    return arr.tolist() if arr.ndim else float(arr)


def _scale_from_json(v):
    return np.asarray(v, dtype=np.float64) if isinstance(v, list) else float(v)


def save_checkpoint(model, path) -> Path:
    """Persist a trained model as JSON; kind is inferred from the type."""
    path = Path(path)
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    if isinstance(model, MlpModel):
        doc.update(kind="mlp", net=_mlp_to_dict(model))
    elif isinstance(model, ClosureModel):
        doc.update(kind="closure", net=_mlp_to_dict(model.net), diffusion_floor=model.diffusion_floor)
    elif isinstance(model, StabilizerModel):
        doc.update(kind="stabilizer", net=_mlp_to_dict(model.net), diffusion_floor=model.diffusion_floor)
    elif isinstance(model, FlowScorePair):
        if not isinstance(model.flow, MlpModel) or (
            model.score is not None and not isinstance(model.score, MlpModel)
        ):
            raise TypeError("only MLP-backed pairs can be checkpointed")
        doc.update(
            kind="pair",
            flow=_mlp_to_dict(model.flow),
            score=None if model.score is None else _mlp_to_dict(model.score),
            target_shift=_scale_to_json(model.target_shift),
            target_scale=_scale_to_json(model.target_scale),
            cond_shift=_scale_to_json(model.cond_shift),
            cond_scale=_scale_to_json(model.cond_scale),
        )
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_checkpoint(path):
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    kind = doc["kind"]
    if kind == "mlp":
        return _mlp_from_dict(doc["net"])
    if kind == "closure":
        return ClosureModel(net=_mlp_from_dict(doc["net"]), diffusion_floor=doc["diffusion_floor"])
    if kind == "stabilizer":
        return StabilizerModel(net=_mlp_from_dict(doc["net"]), diffusion_floor=doc["diffusion_floor"])
    if kind == "pair":
        return FlowScorePair(
            flow=_mlp_from_dict(doc["flow"]),
            score=None if doc["score"] is None else _mlp_from_dict(doc["score"]),
            target_shift=_scale_from_json(doc["target_shift"]),
            target_scale=_scale_from_json(doc["target_scale"]),
            cond_shift=_scale_from_json(doc["cond_shift"]),
            cond_scale=_scale_from_json(doc["cond_scale"]),
        )
    raise ValueError(f"{path}: unknown checkpoint kind {kind!r}")


def save_history(history, path) -> Path:
    path = Path(path)
    rows = np.column_stack([np.arange(len(history)), np.asarray(history, dtype=np.float64)])
    _write_csv(path, "epoch,loss", rows)
    return path


def load_history(path):
    _, data = _read_csv(path, ["epoch", "loss"])
    return data[:, 1].tolist()


def save_quad_report(report: QuadReport, path) -> Path:
    """Model-vs-exact forcing series plus a JSON error summary."""
    path = Path(path)
    _write_csv(
        path,
        "t,tau_exact_x,tau_exact_y,tau_exact_z,tau_quad_x,tau_quad_y,tau_quad_z",
        np.column_stack([report.t, report.tau_exact, report.tau_quad]),
    )
    summary = {"delta": report.delta, "rel_l2": report.rel_l2.tolist()}
    Path(str(path) + ".json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return path


def save_histogram(mass, edges, path) -> Path:
    path = Path(path)
    _write_csv(path, "left,right,mass", np.column_stack([edges[:-1], edges[1:], mass]))
    return path
