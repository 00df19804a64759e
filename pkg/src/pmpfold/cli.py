"""Command-line entry point: ``pmpfold {simulate,fold,pack,evaluate,verify}``.

Every run writes ``manifest.json`` next to its artifacts.  The manifest holds
the fully resolved settings, so ``pmpfold <command> --config manifest.json``
repeats the run and reproduces its CSV files byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent as sac
from .dynamics import FAMILIES, WEIGHTS, DynamicsParams, simulate, write_trajectory_csv
from .errors import GeometryError, PmpFoldError, TopologyError, ValidationError
from .learn import load_checkpoint, save_checkpoint
from .topology import bundled_molecule, load_topology_file

COMMANDS = ("simulate", "fold", "pack", "evaluate", "verify")
MANIFEST = "manifest.json"
MANIFEST_FORMAT = "pmpfold-run"
EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class VerificationFailed(PmpFoldError):
    pass


@dataclass
class RunConfig:
    command: str
    molecule: str = "dialanine"
    family: str = "pmp"
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    sac: sac.SacConfig = field(default_factory=sac.SacConfig)
    seed: int = 0
    out: str = "pmpfold-out"
    episodes: int = 50
    checkpoint: str | None = None
    include_torsions: bool = False
    quick: bool = False
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.command == "pack":
            self.freeze_backbone = True

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "molecule": self.molecule,
            "family": self.family,
            "dynamics": dataclasses.asdict(self.dynamics),
            "sac": self.sac.to_dict(),
            "seed": self.seed,
            "out": self.out,
            "episodes": self.episodes,
            "checkpoint": self.checkpoint,
            "include_torsions": self.include_torsions,
            "quick": self.quick,
            "freeze_backbone": self.freeze_backbone,
        }


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(name):
    return "--" + name.replace("_", "-")


def _value_type(default):
    if isinstance(default, bool):
        return None
    if isinstance(default, int):
        return int
    if isinstance(default, str):
        return str
    if isinstance(default, tuple):
        return lambda text: tuple(int(v) for v in text.split(",") if v.strip())
    return float


def _add_overrides(group, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        kind = _value_type(default)
        if kind is None:
            group.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=None)
        else:
            group.add_argument(_flag(f.name), dest=f.name, type=kind, default=None,
                               metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run settings (a previous manifest.json works)")
    common.add_argument("--molecule", help="molecule file or bundled name")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--family", choices=FAMILIES)
    common.add_argument("--steps", type=int,
                        help="integration steps (simulate) or total training steps (fold, pack)")
    common.add_argument("--mode", dest="reward_mode", choices=("exp", "cubic"),
                        help="reward weight (alias of --reward-mode)")
    common.add_argument("--episodes", type=int, help="evaluation episodes")
    common.add_argument("--checkpoint", help="checkpoint.npz for evaluate")
    common.add_argument("--include-torsions", dest="include_torsions",
                        action=argparse.BooleanOptionalAction, default=None)
    common.add_argument("--quick", action=argparse.BooleanOptionalAction, default=None,
                        help="smaller samples for verify")
    common.add_argument("--freeze-backbone", dest="freeze_backbone",
                        action=argparse.BooleanOptionalAction, default=None,
                        help="fix backbone torsions (implied by pack)")
    dyn = common.add_argument_group("dynamics")
    _add_overrides(dyn, DynamicsParams)
    agent_group = common.add_argument_group("agent")
    _add_overrides(agent_group, sac.SacConfig)

    parser = _Parser(prog="pmpfold", description="Torsion-space folding with PMP dynamics and SAC.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "integrate one dynamics family and write the trajectory",
        "fold": "train the agent on all movable torsions, then evaluate",
        "pack": "as fold, with backbone torsions frozen",
        "evaluate": "evaluate an existing checkpoint",
        "verify": "run the oracle checks",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _read_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("config file must hold a JSON object")
    return doc


def _section(doc, key, cls):
    values = doc.get(key, {}) or {}
    if not isinstance(values, dict):
        raise ValidationError(f"config {key!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValidationError(f"unknown {key} settings: {sorted(unknown)}")
    return dict(values)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    # the positional command wins over a "command" key, so a fold or pack
    # manifest can drive evaluate
    doc = _read_config(args.config) if args.config else {}
    dyn = _section(doc, "dynamics", DynamicsParams)
    agent_cfg = _section(doc, "sac", sac.SacConfig)
    for f in dataclasses.fields(DynamicsParams):
        if getattr(args, f.name, None) is not None:
            dyn[f.name] = getattr(args, f.name)
    for f in dataclasses.fields(sac.SacConfig):
        if getattr(args, f.name, None) is not None:
            agent_cfg[f.name] = getattr(args, f.name)
    if args.steps is not None:
        if args.steps < 0:
            raise ValidationError("--steps must be non-negative")
        if args.command == "simulate":
            dyn["horizon"] = args.steps * float(dyn.get("dt", DynamicsParams.dt))
        else:
            agent_cfg["max_total_steps"] = args.steps

    top_level = {}
    for key in ("molecule", "family", "seed", "out", "episodes", "checkpoint", "include_torsions",
                "quick", "freeze_backbone"):
        value = getattr(args, key, None)
        if value is None:
            value = doc.get(key)
        if value is not None:
            top_level[key] = value
    try:
        cfg = RunConfig(
            command=args.command,
            dynamics=DynamicsParams(**dyn),
            sac=sac.SacConfig(**agent_cfg),
            **top_level,
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    if cfg.family not in FAMILIES:
        raise ValidationError(f"family must be one of {FAMILIES}")
    if cfg.dynamics.cost_weight not in WEIGHTS:
        raise ValidationError(f"cost_weight must be one of {WEIGHTS}")
    if cfg.episodes < 0:
        raise ValidationError("episodes must be non-negative")
    return cfg


# ---------------------------------------------------------------------------
# running


def load_molecule(spec: str, freeze_backbone: bool = False):
    path = Path(spec)
    if path.is_file():
        top = load_topology_file(path)
    else:
        try:
            top = bundled_molecule(spec)
        except FileNotFoundError:
            raise ValidationError(f"molecule {spec!r} is neither a file nor a bundled name") from None
    if freeze_backbone:
        top = top.freeze_kinds({"backbone_dihedral"})
    return top


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, out: Path, artifacts) -> Path:
    doc = {"format": MANIFEST_FORMAT, "version": 1}
    doc.update(cfg.to_dict())
    mol = Path(cfg.molecule)
    if mol.is_file():
        doc["molecule"] = str(mol.resolve())
        doc["molecule_sha256"] = _sha256(mol)
    doc["artifacts"] = {p.name: _sha256(p) for p in artifacts}
    path = out / MANIFEST
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _plot(fn, *args):
    """Plots are optional: failures become warnings and the run continues."""
    try:
        from . import plotting

        getattr(plotting, fn)(*args)
        return True
    except Exception as exc:  # noqa: BLE001
        warnings.warn(f"plot {args[-1]} skipped: {exc}", RuntimeWarning, stacklevel=2)
        return False


def _run_simulate(cfg: RunConfig, out: Path) -> list:
    top = load_molecule(cfg.molecule, cfg.freeze_backbone)
    rng = np.random.default_rng(cfg.seed)
    conf = sac.env_reset(top, rng)
    traj = simulate(top, conf, np.zeros(top.n_torsions), cfg.dynamics, cfg.family,
                    seed=int(rng.integers(2**63)))
    csv_path = out / "trajectory.csv"
    write_trajectory_csv(traj, csv_path, cfg.include_torsions)
    artifacts = [csv_path]
    svg = out / "trajectory.svg"
    if traj.states and _plot("plot_trajectory", traj, svg):
        artifacts.append(svg)
    write_manifest(cfg, out, artifacts)
    if traj.aborted:
        raise PmpFoldError(f"trajectory aborted after {len(traj) - 1} steps: {traj.error}")
    u = traj.potential
    print(f"simulate: {len(traj) - 1} steps, U {u[0]:.6g} -> {u[-1]:.6g}; wrote {csv_path}")
    return artifacts


def _write_eval(cfg, out, episodes, artifacts):
    eval_path = out / "eval.csv"
    sac.write_eval_csv(episodes, eval_path)
    artifacts.append(eval_path)
    for fn, name in (("plot_energy_change", "energy_change.svg"),
                     ("plot_cumulative_reward", "cumulative_reward.svg")):
        if episodes and _plot(fn, episodes, out / name):
            artifacts.append(out / name)
    if episodes:
        delta = float(np.nanmean([e.delta_E for e in episodes]))
        reward = float(np.nanmean([e.cumulative_reward for e in episodes]))
        print(f"evaluate: {len(episodes)} episodes, mean delta_E {delta:.6g}, "
              f"mean cumulative reward {reward:.6g}")


def _run_train(cfg: RunConfig, out: Path) -> list:
    top = load_molecule(cfg.molecule, cfg.freeze_backbone)
    if top.n_torsions == 0:
        raise ValidationError("no movable torsions")
    result = sac.train(top, cfg.sac, seed=cfg.seed)
    artifacts = []
    log_path = out / "training_log.csv"
    sac.write_training_log(result.log, log_path)
    artifacts.append(log_path)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, result.checkpoints)
    artifacts.append(ckpt)
    if result.log and _plot("plot_training_energy", result.log, out / "training_energy.svg"):
        artifacts.append(out / "training_energy.svg")
    print(f"{cfg.command}: {cfg.sac.max_total_steps} steps, {len(result.log)} episodes")
    episodes = sac.evaluate(top, result.agent, cfg.episodes, seed=cfg.seed, config=cfg.sac)
    _write_eval(cfg, out, episodes, artifacts)
    write_manifest(cfg, out, artifacts)
    return artifacts


def _run_evaluate(cfg: RunConfig, out: Path) -> list:
    if not cfg.checkpoint:
        raise UsageError("evaluate needs --checkpoint")
    top = load_molecule(cfg.molecule, cfg.freeze_backbone)
    try:
        arrays = load_checkpoint(cfg.checkpoint)
    except FileNotFoundError:
        raise ValidationError(f"checkpoint not found: {cfg.checkpoint}") from None
    agent = sac.Agent.from_checkpoint(arrays)
    if agent.policy.action_dim != top.n_torsions:
        raise ValidationError(f"checkpoint acts on {agent.policy.action_dim} torsions, "
                              f"molecule has {top.n_torsions}")
    episodes = sac.evaluate(top, agent, cfg.episodes, seed=cfg.seed, config=cfg.sac)
    artifacts = []
    _write_eval(cfg, out, episodes, artifacts)
    write_manifest(cfg, out, artifacts)
    return artifacts


def _run_verify(cfg: RunConfig, out: Path) -> list:
    from .verify import load_fixture, run_suite

    results = run_suite(load_fixture(), quick=cfg.quick, seed=cfg.seed)
    report = out / "verify.csv"
    with open(report, "w") as fh:
        fh.write("check,passed,value,threshold\n")
        for r in results:
            print(r.line())
            fh.write(f"{r.name},{int(r.passed)},{r.value!r},{r.threshold!r}\n")
    write_manifest(cfg, out, [report])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return [report]


RUNNERS = {
    "simulate": _run_simulate,
    "fold": _run_train,
    "pack": _run_train,
    "evaluate": _run_evaluate,
    "verify": _run_verify,
}


def run(cfg: RunConfig) -> int:
    """Execute one experiment; raises on failure, returns 0 on success."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    RUNNERS[cfg.command](cfg, out)
    return EXIT_OK


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (TopologyError, GeometryError, ValueError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def report_error(exc: BaseException, code: int) -> None:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc), file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return run(cfg)
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001
        code = exit_code_for(exc)
        report_error(exc, code)
        if os.environ.get("PMPFOLD_TRACEBACK"):
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
