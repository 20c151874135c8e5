"""Experiment harness: forward simulation, reconstruction, design optimization.

Subcommands:

* ``forward``      synthesize clean and noisy observation data for a phantom
* ``reconstruct``  MAP estimate from an observation file
* ``oed``          optimize the illumination design, then compare before/after
* ``eig``          export the prior eigenvalue decay

Every command is a pure function of (config, seed): reruns produce
byte-identical CSV artifacts.  Exit codes: 0 success, 2 configuration error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .fracwave import (
    FracParams,
    IntensityDesign,
    ObservationSeries,
    SolverContext,
    SolverError,
    TimeGrid,
    apply_W,
)
from .grid_fem import Mesh, assemble, build_mesh, MeshError
from .map_reconstruct import InverseProblemSetup, add_noise, map_estimate, rel_error
from .oed import (
    DesignConstraints,
    OptimizerOptions,
    load_gram,
    optimize_design,
    phi_n,
    precompute_gram,
    save_gram,
)
from .priors import BiLaplacianPrior, OrnsteinUhlenbeckPrior


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


DEFAULT_SHAPES = [
    {"kind": "disk", "center": [-0.3, 0.3], "size": 0.2, "value": 1.0},
    {"kind": "disk", "center": [0.35, -0.3], "size": 0.18, "value": 0.5},
    {"kind": "rect", "center": [0.3, 0.25], "size": [0.3, 0.3], "value": 1.0},
]

_SCHEMA = {
    "mesh": {"nx": 20},
    "time": {"T": 0.2, "nt": None},
    "physics": {"alpha": 0.3, "r0": 1e-4, "c": 300.0},
    "prior": {"kind": "bilaplacian", "gamma": 1.0, "delta": 8.0, "eta": 0.1, "ell": 0.1},
    "noise": {"sigma2": 1e-2, "seed": 0},
    "design": {"I": 100.0, "d": [1.0, 0.0, 0.0, 0.0, 0.0], "omega": 100.0 * np.pi, "K": 5},
    "oed": {"N": None, "tol": 1e-6, "maxit": 500},
    "solver": {"cg_rtol": 1e-8, "cg_maxit": 200},
    "io": {"outdir": "out", "emit_images": False},
    "phantom": {"shapes": DEFAULT_SHAPES},
}


@dataclasses.dataclass
class ExperimentConfig:
    """Normalized experiment configuration (defaults filled in)."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.data))

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"


def _merge_section(name: str, defaults: dict, given: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        out[key] = given.get(key, default)
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")
    data = {}
    for section, defaults in _SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section '{section}' must be an object")
        data[section] = _merge_section(section, defaults, given)

    mesh_nx = data["mesh"]["nx"]
    if not isinstance(mesh_nx, int) or mesh_nx < 4 or mesh_nx % 10 != 0:
        raise ConfigError("mesh.nx must be an integer >= 4 divisible by 10")
    T = data["time"]["T"]
    c = data["physics"]["c"]
    for key, val in [("time.T", T), ("physics.c", c),
                     ("physics.r0", data["physics"]["r0"]),
                     ("noise.sigma2", data["noise"]["sigma2"]),
                     ("design.I", data["design"]["I"]),
                     ("design.omega", data["design"]["omega"]),
                     ("prior.gamma", data["prior"]["gamma"]),
                     ("prior.delta", data["prior"]["delta"]),
                     ("prior.eta", data["prior"]["eta"]),
                     ("prior.ell", data["prior"]["ell"])]:
        if not val > 0:
            raise ConfigError(f"{key} must be positive, got {val}")
    alpha = data["physics"]["alpha"]
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"physics.alpha must lie in (0, 1), got {alpha}")
    if data["prior"]["kind"] not in ("bilaplacian", "ornstein-uhlenbeck"):
        raise ConfigError("prior.kind must be 'bilaplacian' or 'ornstein-uhlenbeck'")

    if data["time"]["nt"] is None:
        # keep c * dt / h <= 1 even though the stepper is implicit
        nt = int(np.ceil(c * T * mesh_nx / 2.0))
        data["time"]["nt"] = nt + (nt % 2)
    nt = data["time"]["nt"]
    if not isinstance(nt, int) or nt < 2 or nt % 2 != 0:
        raise ConfigError("time.nt must be an even integer >= 2")

    n = (mesh_nx + 1) ** 2
    if data["oed"]["N"] is None:
        data["oed"]["N"] = min(160, n // 4)
    if not 1 <= data["oed"]["N"] <= n:
        raise ConfigError(f"oed.N must lie in [1, {n}]")

    K = data["design"]["K"]
    d = data["design"]["d"]
    if not isinstance(d, list) or len(d) != K:
        raise ConfigError(f"design.d must be a list of length design.K = {K}")

    shapes = data["phantom"]["shapes"]
    if not isinstance(shapes, list):
        raise ConfigError("phantom.shapes must be a list")
    for shape in shapes:
        if shape.get("kind") not in ("disk", "rect"):
            raise ConfigError("phantom shapes must have kind 'disk' or 'rect'")

    data["design"]["d"] = [float(v) for v in d]
    return ExperimentConfig(data=data)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw)


def build_phantom(mesh: Mesh, shapes: list[dict]) -> np.ndarray:
    """Piecewise-constant absorption field from disk/rect primitives."""
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    a = np.zeros(mesh.n_nodes)
    for shape in shapes:
        cx, cy = shape["center"]
        if shape["kind"] == "disk":
            mask = (x - cx) ** 2 + (y - cy) ** 2 <= float(shape["size"]) ** 2
        else:
            w, h = shape["size"]
            mask = (np.abs(x - cx) <= w / 2.0) & (np.abs(y - cy) <= h / 2.0)
        a[mask] = float(shape["value"])
    return a


# -- assembled experiment pieces ----------------------------------------------


class Experiment:
    """Mesh, matrices, solver context, prior, and design from one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.mesh = build_mesh(cfg["mesh"]["nx"])
        self.matrices = assemble(self.mesh, cfg["prior"]["gamma"], cfg["prior"]["delta"],
                                 cfg["time"]["nt"], cfg["time"]["T"])
        self.params = FracParams.from_attenuation(cfg["physics"]["alpha"],
                                                  cfg["physics"]["c"], cfg["physics"]["r0"])
        self.grid = TimeGrid.build(cfg["time"]["T"], cfg["time"]["nt"], cfg["physics"]["alpha"])
        self.ctx = SolverContext(self.mesh, self.matrices, self.params, self.grid)
        self.design = IntensityDesign(I=cfg["design"]["I"], d=np.array(cfg["design"]["d"]),
                                      omega=cfg["design"]["omega"], T=cfg["time"]["T"])
        self.phantom = build_phantom(self.mesh, cfg["phantom"]["shapes"])

    def make_prior(self):
        cfg = self.cfg
        if cfg["prior"]["kind"] == "bilaplacian":
            return BiLaplacianPrior(self.matrices)
        return OrnsteinUhlenbeckPrior(self.mesh, self.matrices,
                                      cfg["prior"]["eta"], cfg["prior"]["ell"])


# -- file emitters --------------------------------------------------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_observation_csv(path: str, obs: ObservationSeries, node_ids: np.ndarray) -> None:
    times = obs.grid.times
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"node_{i}" for i in node_ids) + "\n")
        for t, row in zip(times, obs.values):
            fh.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")


def read_observation_csv(path: str, grid: TimeGrid) -> ObservationSeries:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[0] != grid.nt + 1:
        raise ConfigError(
            f"observation file has {data.shape[0]} rows, expected {grid.nt + 1}"
        )
    return ObservationSeries(values=data[:, 1:].copy(), grid=grid)


def write_field_csv(path: str, mesh: Mesh, field: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("node,x,y,value\n")
        for i, ((x, y), v) in enumerate(zip(mesh.nodes, field)):
            fh.write(f"{i},{_fmt(x)},{_fmt(y)},{_fmt(v)}\n")


def write_field_pgm(path: str, mesh: Mesh, field: np.ndarray) -> None:
    """8-bit PGM of the nodal grid, min-max scaled; scale kept in a sidecar."""
    side = mesh.nx + 1
    img = field.reshape(side, side)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.round((img - lo) / span * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5 {side} {side} 255\n".encode())
        fh.write(scaled[::-1].tobytes())       # row 0 at the top = y max
    with open(path + ".txt", "w") as fh:
        fh.write(f"min {_fmt(lo)}\nmax {_fmt(hi)}\n")


def write_history_csv(path: str, history) -> None:
    with open(path, "w") as fh:
        fh.write("iter,phi,l1,step\n")
        for it, phi, l1, step in history:
            fh.write(f"{it},{_fmt(phi)},{_fmt(l1)},{_fmt(step)}\n")


def append_stats(path: str, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_forward(cfg: ExperimentConfig, outdir: str) -> int:
    exp = Experiment(cfg)
    os.makedirs(outdir, exist_ok=True)
    clean = apply_W(exp.ctx, exp.phantom, exp.design)
    seed = cfg["noise"]["seed"]
    noisy = add_noise(clean, float(np.sqrt(cfg["noise"]["sigma2"])), seed)
    write_observation_csv(os.path.join(outdir, "obs_clean.csv"), clean, exp.mesh.obs_nodes)
    write_observation_csv(os.path.join(outdir, "obs_noisy.csv"), noisy, exp.mesh.obs_nodes)
    write_field_csv(os.path.join(outdir, "phantom.csv"), exp.mesh, exp.phantom)
    meta = {
        "seed": seed,
        "sigma2": cfg["noise"]["sigma2"],
        "max_amplitude": float(np.abs(clean.values).max()),
        "n_obs_nodes": int(len(exp.mesh.obs_nodes)),
    }
    with open(os.path.join(outdir, "forward_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    return 0


def _reconstruct(exp: Experiment, prior, p_obs: ObservationSeries,
                 design: IntensityDesign, cfg: ExperimentConfig):
    setup = InverseProblemSetup(design=design, prior=prior,
                                sigma2=cfg["noise"]["sigma2"], p_obs=p_obs,
                                cg_rtol=cfg["solver"]["cg_rtol"],
                                cg_maxit=cfg["solver"]["cg_maxit"])
    return map_estimate(exp.ctx, setup)


def cmd_reconstruct(cfg: ExperimentConfig, obs_path: str, outdir: str) -> int:
    exp = Experiment(cfg)
    os.makedirs(outdir, exist_ok=True)
    p_obs = read_observation_csv(obs_path, exp.grid)
    prior = exp.make_prior()
    result = _reconstruct(exp, prior, p_obs, exp.design, cfg)
    write_field_csv(os.path.join(outdir, "a_map.csv"), exp.mesh, result.a_map)
    if cfg["io"]["emit_images"]:
        write_field_pgm(os.path.join(outdir, "a_map.pgm"), exp.mesh, result.a_map)
    record = {
        "iters": result.iterations,
        "residual": result.residual,
        "converged": result.converged,
        "seed": cfg["noise"]["seed"],
    }
    if np.any(exp.phantom != 0.0):
        record["rel_error"] = rel_error(result.a_map, exp.phantom, exp.matrices.M)
    append_stats(os.path.join(outdir, "stats.jsonl"), record)
    return 0


def cmd_oed(cfg: ExperimentConfig, outdir: str, gram_manifest: str | None) -> int:
    exp = Experiment(cfg)
    os.makedirs(outdir, exist_ok=True)
    prior = exp.make_prior()
    K = cfg["design"]["K"]
    omega = cfg["design"]["omega"]

    if gram_manifest is not None:
        gram = load_gram(gram_manifest)
        if gram.K != K or abs(gram.omega - omega) > 1e-12:
            raise ConfigError("gram manifest does not match the design configuration")
    else:
        basis = prior.eigenbasis(cfg["oed"]["N"])
        gram = precompute_gram(exp.ctx, basis, K, omega)
        save_gram(gram, os.path.join(outdir, "gram"))

    sigma2 = cfg["noise"]["sigma2"]
    d0 = np.array(cfg["design"]["d"])
    i0 = exp.design
    constraints = DesignConstraints.from_initial(i0, K=K)
    opts = OptimizerOptions(tol=cfg["oed"]["tol"], maxit=cfg["oed"]["maxit"])
    opt = optimize_design(gram, constraints, d0, sigma2, opts)
    i_opt = IntensityDesign(I=opt.I_opt, d=opt.d_opt, omega=omega, T=cfg["time"]["T"])

    phi0 = phi_n(gram, d0, i0.I, sigma2)
    write_history_csv(os.path.join(outdir, "phi_history.csv"), opt.history)
    summary = {
        "I_0": i0.I,
        "I_opt": opt.I_opt,
        "d_0": [float(v) for v in d0],
        "d_opt": [float(v) for v in opt.d_opt],
        "phi_0": phi0,
        "phi_opt": opt.phi_opt,
        "converged": opt.converged,
        "iterations": len(opt.history) - 1,
    }

    # before/after reconstruction comparison under the same noise seed
    seed = cfg["noise"]["seed"]
    sigma = float(np.sqrt(sigma2))
    rows = []
    for tag, design, phi in (("initial", i0, phi0), ("optimized", i_opt, opt.phi_opt)):
        clean = apply_W(exp.ctx, exp.phantom, design)
        p_obs = add_noise(clean, sigma, seed)
        rec = _reconstruct(exp, prior, p_obs, design, cfg)
        err = rel_error(rec.a_map, exp.phantom, exp.matrices.M) if np.any(exp.phantom != 0) else float("nan")
        rows.append((tag, phi, err, rec.iterations))
        write_field_csv(os.path.join(outdir, f"a_map_{tag}.csv"), exp.mesh, rec.a_map)
        if cfg["io"]["emit_images"]:
            write_field_pgm(os.path.join(outdir, f"a_map_{tag}.pgm"), exp.mesh, rec.a_map)
    summary["rel_error_initial"] = rows[0][2]
    summary["rel_error_optimized"] = rows[1][2]

    with open(os.path.join(outdir, "design_opt.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(outdir, "comparison.csv"), "w") as fh:
        fh.write("design,phi,rel_error,cg_iters\n")
        for tag, phi, err, iters in rows:
            fh.write(f"{tag},{_fmt(phi)},{_fmt(err)},{iters}\n")
    return 0


def cmd_eig(cfg: ExperimentConfig, outdir: str) -> int:
    exp = Experiment(cfg)
    os.makedirs(outdir, exist_ok=True)
    prior = exp.make_prior()
    basis = prior.eigenbasis(cfg["oed"]["N"])
    path = os.path.join(outdir, "eigenvalues.csv")
    with open(path, "w") as fh:
        fh.write("index,lambda\n")
        for i, lam in enumerate(basis.lam):
            fh.write(f"{i},{_fmt(lam)}\n")
    with open(os.path.join(outdir, "eig_meta.json"), "w") as fh:
        json.dump({"kind": cfg["prior"]["kind"], "full_trace": basis.full_trace,
                   "N": int(basis.N)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg["io"]["emit_images"]:
        _plot_decay(basis.lam, os.path.join(outdir, "eigenvalues.png"),
                    cfg["prior"]["kind"])
    return 0


def _plot_decay(lam: np.ndarray, path: str, kind: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(np.arange(1, len(lam) + 1), lam, "o-", markersize=3)
    ax.set_xlabel("mode index")
    ax.set_ylabel("eigenvalue")
    ax.set_title(f"prior eigenvalue decay ({kind})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- entry point ----------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patoed",
                                     description="damped photoacoustic tomography experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment configuration")
        p.add_argument("--seed", type=int, default=None, help="override noise.seed")
        p.add_argument("--out", default=None, help="override io.outdir")

    p_fwd = sub.add_parser("forward", help="simulate observations for the phantom")
    common(p_fwd)
    p_rec = sub.add_parser("reconstruct", help="MAP estimate from observations")
    common(p_rec)
    p_rec.add_argument("obs", help="observation CSV (from the forward command)")
    p_oed = sub.add_parser("oed", help="optimize the illumination design")
    common(p_oed)
    p_oed.add_argument("--gram", default=None, help="existing gram manifest.json to reuse")
    p_eig = sub.add_parser("eig", help="export prior eigenvalue decay")
    common(p_eig)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.data["noise"]["seed"] = args.seed
        outdir = args.out if args.out is not None else cfg["io"]["outdir"]
        if args.command == "forward":
            return cmd_forward(cfg, outdir)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, args.obs, outdir)
        if args.command == "oed":
            return cmd_oed(cfg, outdir, args.gram)
        if args.command == "eig":
            return cmd_eig(cfg, outdir)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, MeshError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
