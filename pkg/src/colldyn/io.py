"""Dataset-directory and estimate serialization.

Dataset directories are human-inspectable and language-neutral:

  meta.json     schema_version, M, L, N, d, K, order, types[], times[],
                model, model_params, seed, noise_sigma, derivative_source
                (+ masses[] and force for second-order systems)
  traj_<m>.csv  header t,agent,x1..xd[,v1..vd][,a1..ad], rows sorted by
                (t, agent), floats at 17 significant digits

The 17-digit rule makes every float decimal round-trip bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import (
    ParametricForce,
    SystemSpec,
    TrajectoryDataset,
    TypePartition,
)
from .errors import DataError
from .estimator import (
    FAMILY_BSPLINE,
    HypothesisSpace,
    KernelEstimate,
)
from .featmap import ReductionMap
from .gp import CovarianceSpec, GPConfig
from .measure import EmpiricalRho

SCHEMA_VERSION = 1


def fmt(x: float) -> str:
    """Format a float at 17 significant digits (decimal round-trip exact)."""
    return format(float(x), ".17g")


def save_dataset(ds: TrajectoryDataset, outdir, model: str = "",
                 model_params: dict | None = None) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = ds.spec
    meta = {
        "schema_version": SCHEMA_VERSION,
        "M": ds.M, "L": ds.L, "N": ds.N, "d": ds.d, "K": spec.K,
        "order": spec.order,
        "types": spec.partition.labels.tolist(),
        "times": [float(t) for t in ds.times],
        "model": model,
        "model_params": model_params or {},
        "seed": ds.seed,
        "noise_sigma": float(ds.noise_sigma),
        "derivative_source": ds.derivative_source,
    }
    if spec.order == "second":
        meta["masses"] = [float(m) for m in spec.masses]
        meta["force"] = {"kind": spec.force.kind, "params": list(spec.force.params)}
    with open(outdir / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")

    cols = [f"x{j+1}" for j in range(ds.d)]
    if ds.velocities is not None:
        cols += [f"v{j+1}" for j in range(ds.d)]
    if ds.accelerations is not None:
        cols += [f"a{j+1}" for j in range(ds.d)]
    header = "t,agent," + ",".join(cols)
    for m in range(ds.M):
        lines = [header]
        for l in range(ds.L):
            t_str = fmt(ds.times[l])
            for i in range(ds.N):
                vals = list(ds.positions[m, l, i])
                if ds.velocities is not None:
                    vals += list(ds.velocities[m, l, i])
                if ds.accelerations is not None:
                    vals += list(ds.accelerations[m, l, i])
                lines.append(f"{t_str},{i}," + ",".join(fmt(v) for v in vals))
        (outdir / f"traj_{m}.csv").write_text("\n".join(lines) + "\n")
    return outdir


def load_dataset(path) -> tuple[TrajectoryDataset, dict]:
    """Read a dataset directory; returns (dataset, meta dict)."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    M, L, N, d = meta["M"], meta["L"], meta["N"], meta["d"]
    partition = TypePartition(labels=np.asarray(meta["types"], dtype=int), K=meta["K"])
    force = ParametricForce("none")
    masses = None
    if meta["order"] == "second":
        fk = meta.get("force", {"kind": "none", "params": [0.0, 0.0]})
        force = ParametricForce(fk["kind"], tuple(fk.get("params", (0.0, 0.0))))
        if "masses" in meta:
            masses = np.asarray(meta["masses"], dtype=float)
    spec = SystemSpec(order=meta["order"], N=N, d=d, partition=partition,
                      masses=masses, force=force, kernel_set=meta.get("model", ""))

    times = np.asarray(meta["times"], dtype=float)
    positions = np.empty((M, L, N, d))
    velocities = None
    accelerations = None
    for m in range(M):
        f = path / f"traj_{m}.csv"
        if not f.exists():
            raise DataError(f"missing trajectory file {f}")
        raw = np.genfromtxt(f, delimiter=",", names=True)
        names = raw.dtype.names
        has_v = f"v{d}" in names
        has_a = f"a{d}" in names
        if velocities is None and has_v:
            velocities = np.empty((M, L, N, d))
        if accelerations is None and has_a:
            accelerations = np.empty((M, L, N, d))
        table = np.column_stack([raw[name] for name in names])
        # rows are sorted by (t, agent): row index = l * N + i
        for l in range(L):
            block = table[l * N:(l + 1) * N]
            order = np.argsort(block[:, 1])
            block = block[order]
            positions[m, l] = block[:, 2:2 + d]
            col = 2 + d
            if has_v:
                velocities[m, l] = block[:, col:col + d]
                col += d
            if has_a:
                accelerations[m, l] = block[:, col:col + d]
    ds = TrajectoryDataset(
        times=times, positions=positions, velocities=velocities,
        accelerations=accelerations, derivative_source=meta["derivative_source"],
        spec=spec, seed=meta["seed"], noise_sigma=meta["noise_sigma"],
    )
    return ds, meta


def _estimate_to_dict(est: KernelEstimate) -> dict:
    space = est.space
    if not isinstance(space, HypothesisSpace):
        raise DataError("only 1-d kernel estimates serialize to JSON")
    out = {
        "role": est.role,
        "type_pair": list(est.type_pair),
        "family": space.family,
        "R_min": space.r_min,
        "R_max": space.r_max,
        "knots": [float(k) for k in space.knots],
        "alpha": [float(a) for a in est.alpha],
    }
    if space.family == FAMILY_BSPLINE:
        out["degree"] = space.degree
    return out


def save_estimates(estimates: list[KernelEstimate], path) -> Path:
    path = Path(path)
    doc = {"schema_version": SCHEMA_VERSION,
           "estimates": [_estimate_to_dict(e) for e in estimates]}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_estimates(path) -> list[KernelEstimate]:
    doc = json.loads(Path(path).read_text())
    out = []
    for item in doc["estimates"]:
        knots = np.asarray(item["knots"], dtype=float)
        family = item["family"]
        degree = int(item.get("degree", 3))
        n = len(item["alpha"])
        space = HypothesisSpace(r_min=item["R_min"], r_max=item["R_max"],
                                family=family, n=n, knots=knots, degree=degree)
        out.append(KernelEstimate(space=space, alpha=np.asarray(item["alpha"]),
                                  type_pair=tuple(item["type_pair"]), role=item["role"]))
    return out


def save_reduction_map(rmap: ReductionMap, path) -> Path:
    path = Path(path)
    doc = {
        "d": rmap.d, "D": rmap.D, "d_prime": rmap.d_prime,
        "beta": [float(b) for b in rmap.beta_hat],
        "B": [[float(v) for v in row] for row in rmap.B_hat],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_reduction_map(path) -> ReductionMap:
    doc = json.loads(Path(path).read_text())
    return ReductionMap(B_hat=np.asarray(doc["B"], dtype=float),
                        d_prime=doc["d_prime"],
                        beta_hat=np.asarray(doc["beta"], dtype=float),
                        d=doc["d"], D=doc["D"])


def save_rho_csv(rho: EmpiricalRho, path) -> Path:
    path = Path(path)
    lines = ["bin_left,bin_right,weight"]
    for left, right, w in zip(rho.bin_edges[:-1], rho.bin_edges[1:], rho.weights):
        lines.append(f"{fmt(left)},{fmt(right)},{fmt(w)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_rho_csv(path, type_pair="all") -> EmpiricalRho:
    table = np.genfromtxt(path, delimiter=",", names=True)
    left = np.atleast_1d(table["bin_left"])
    right = np.atleast_1d(table["bin_right"])
    w = np.atleast_1d(table["weight"])
    edges = np.concatenate([left, right[-1:]])
    return EmpiricalRho(bin_edges=edges, weights=w, type_pair=type_pair)


def save_gp_config(cfg: GPConfig, path) -> Path:
    path = Path(path)
    doc = {
        "cov_E": {"family": cfg.cov_E.family,
                  "signal_variance": cfg.cov_E.signal_variance,
                  "lengthscale": cfg.cov_E.lengthscale},
        "cov_A": {"family": cfg.cov_A.family,
                  "signal_variance": cfg.cov_A.signal_variance,
                  "lengthscale": cfg.cov_A.lengthscale},
        "noise_sigma": cfg.noise_sigma,
        "force_params": list(cfg.force_params),
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_gp_config(path) -> GPConfig:
    doc = json.loads(Path(path).read_text())

    def cov(key):
        c = doc[key]
        return CovarianceSpec(family=c["family"], signal_variance=c["signal_variance"],
                              lengthscale=c["lengthscale"])

    return GPConfig(cov_E=cov("cov_E"), cov_A=cov("cov_A"),
                    noise_sigma=doc["noise_sigma"],
                    force_params=tuple(doc["force_params"]))


def save_posterior_csv(r, mean, std, path) -> Path:
    path = Path(path)
    lines = ["r,mean,std"]
    for ri, mi, si in zip(r, mean, std):
        lines.append(f"{fmt(ri)},{fmt(mi)},{fmt(si)}")
    path.write_text("\n".join(lines) + "\n")
    return path


def save_table_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def save_report(report: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, default=_jsonable) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)
