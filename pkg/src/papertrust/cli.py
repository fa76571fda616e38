"""papertrust command line: populations, metric sweeps, attack campaigns, scenarios.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import attacks as attacks_mod
from .chainnet import ScenarioConfig, run_scenario
from .errors import ConfigError, InsufficientPopulation, InvalidConfig, InvalidParams, PaperTrustError
from .features import QuantizerConfig
from .pufmetrics import (eer, genuine_impostor_scores, mean_uniqueness, robustness, simulate_batch,
                         uniformity, uniqueness)
from .surface import SurfaceParams, generate_surface

log = logging.getLogger("papertrust")

SCHEMA_VERSION = 1
BUNDLED = ("auction-house", "ecommerce-p2p", "semiconductor-hybrid", "metrics", "attack", "gen")


@dataclass
class RunConfig:
    command: str
    config_path: str
    output_dir: Path
    seed: Optional[int] = None
    workers: int = 1
    force: bool = False


class UsageError(Exception):
    pass


def load_config(path: str) -> dict:
    """Read a YAML config from disk, or a bundled sample by name."""
    p = Path(path)
    if p.exists():
        text = p.read_text()
    elif path in BUNDLED:
        text = resources.files("papertrust.configs").joinpath(f"{path}.yaml").read_text()
    else:
        raise UsageError(f"config {path!r} not found")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise UsageError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a mapping")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UsageError(f"config schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return data


class Outputs:
    """Collects output files and refuses to overwrite unless forced."""

    def __init__(self, out_dir: Path, force: bool):
        self.out_dir = out_dir
        self.force = force
        self.files: Dict[str, str] = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def write(self):
        targets = [self.out_dir / n for n in self.files]
        clash = [str(t) for t in targets if t.exists()]
        if clash and not self.force:
            raise UsageError(f"refusing to overwrite {', '.join(clash)} (use --force)")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            path = self.out_dir / name
            path.parent.mkdir(parents=True, exist_ok=True)
            if isinstance(text, bytes):
                path.write_bytes(text)
            else:
                path.write_text(text)
            log.info("wrote %s", path)


def _quantizer(d: dict) -> QuantizerConfig:
    q = QuantizerConfig(d.get("scheme", "sign"), tuple(d.get("components", ("nx", "ny"))),
                        int(d.get("downsample_stride", 2)))
    q.validate()
    return q


def _csv(rows: List[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# gen ------------------------------------------------------------------------------

def cmd_gen(run: RunConfig, cfg: dict) -> Outputs:
    count = int(cfg.get("count", 10))
    s = cfg.get("surface", {})
    seed = run.seed if run.seed is not None else int(cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    out = Outputs(run.output_dir, run.force)
    manifest = []
    for i in range(count):
        params = SurfaceParams(int(s.get("size", 64)), int(s.get("size", 64)),
                               float(s.get("correlation_length", 3.0)), float(s.get("slope_scale", 0.2)),
                               int(rng.integers(0, 2**62)))
        blob = generate_surface(params).to_bytes()
        name = f"surfaces/surface_{i:04d}.nmap"
        out.add(name, blob)
        manifest.append({"file": name, "seed": params.seed, "sha256": hashlib.sha256(blob).hexdigest()})
    out.add("manifest.json", json.dumps({"seed": seed, "surfaces": manifest}, sort_keys=True, indent=2))
    return out


# metrics --------------------------------------------------------------------------

def _batch_job(args):
    K, T, noise, surf, quantizer, mode, seed = args
    return simulate_batch(K, T, noise, int(surf.get("size", 64)), float(surf.get("correlation_length", 3.0)),
                          float(surf.get("slope_scale", 0.2)), quantizer, mode, seed)


def cmd_metrics(run: RunConfig, cfg: dict) -> Outputs:
    K = int(cfg.get("K", 50))
    T = int(cfg.get("T", 3))
    if K < 2:
        raise InsufficientPopulation(f"K={K}: uniqueness needs at least two surfaces")
    if T < 1:
        raise InvalidConfig("T must be >= 1")
    noise_levels = [float(n) for n in cfg.get("noise_levels", [0.01])]
    surf = cfg.get("surface", {})
    quantizer = _quantizer(cfg.get("quantizer", {}))
    mode = cfg.get("mode", "scanner")
    seed = run.seed if run.seed is not None else int(cfg.get("seed", 0))

    jobs = [(K, T, n, surf, quantizer, mode, seed) for n in noise_levels]
    if run.workers > 1:
        with ProcessPoolExecutor(max_workers=run.workers) as pool:
            batches = list(pool.map(_batch_job, jobs))
    else:
        batches = [_batch_job(j) for j in jobs]

    out = Outputs(run.output_dir, run.force)
    per_surface = [["noise", "k", "robustness", "uniformity_mean"]]
    uniq_rows = [["noise", "t", "uniqueness"]]
    summary = {"K": K, "T": T, "L": batches[0].L, "seed": seed, "levels": []}
    for noise, batch in zip(noise_levels, batches):
        rob = [robustness(batch, k) for k in range(K)]
        uni = [[uniformity(batch, k, t) for t in range(T)] for k in range(K)]
        for k in range(K):
            per_surface.append([repr(noise), k, repr(rob[k]), repr(float(np.mean(uni[k])))])
        for t in range(T):
            uniq_rows.append([repr(noise), t, repr(uniqueness(batch, t))])
        g, i = genuine_impostor_scores(batch)
        rep = eer(g, i, "distance")
        tag = f"{noise:g}"
        out.add(f"scores_noise_{tag}.csv", rep.to_csv())
        summary["levels"].append({
            "noise": noise,
            "robustness_mean": float(np.mean(rob)),
            "robustness_min": float(np.min(rob)),
            "uniqueness": uniqueness(batch, 0),
            "uniqueness_t_average": mean_uniqueness(batch),
            "uniformity_mean": float(np.mean(uni)),
            "eer": rep.eer,
            "threshold": rep.threshold_at_eer,
            "n_genuine": len(g),
            "n_impostor": len(i),
            "separation_pooled_sd": rep.separation(),
        })
    out.add("metrics_per_surface.csv", _csv(per_surface))
    out.add("uniqueness.csv", _csv(uniq_rows))
    out.add("summary.json", json.dumps(summary, sort_keys=True, indent=2))
    return out


# attack ---------------------------------------------------------------------------

def cmd_attack(run: RunConfig, cfg: dict) -> Outputs:
    names = list(cfg.get("attacks", attacks_mod.ATTACKS))
    unknown = [a for a in names if a not in attacks_mod.MITIGATIONS]
    if unknown:
        raise ConfigError(f"unknown attack(s): {', '.join(unknown)}")
    mit_names = cfg.get("mitigations", ["off", "on"])
    try:
        mitigations = [{"off": False, "on": True}[m] for m in mit_names]
    except KeyError as exc:
        raise ConfigError(f"mitigations must be 'off' or 'on', got {exc}") from None
    base = int(run.seed if run.seed is not None else cfg.get("seed", 0))
    seeds = [base + int(s) for s in cfg.get("seeds", [0])]
    overrides = cfg.get("deployment", {})
    known = {f.name for f in fields(attacks_mod.DeploymentConfig)}
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown deployment keys: {sorted(bad)}")
    dep = replace(attacks_mod.DeploymentConfig(), **overrides)
    result = attacks_mod.run_campaign(names, seeds, mitigations, dep, workers=run.workers)
    out = Outputs(run.output_dir, run.force)
    out.add("attack_matrix.csv", result.to_csv())
    out.add("attack_summary.json", result.to_json())
    return out


# scenario -------------------------------------------------------------------------

def cmd_scenario(run: RunConfig, cfg: dict) -> Outputs:
    if run.seed is not None:
        cfg = {**cfg, "seed": run.seed}
    scenario = ScenarioConfig.from_dict(cfg)
    report = run_scenario(scenario)
    out = Outputs(run.output_dir, run.force)
    out.add("report.json", report.to_json())
    out.add("ledger.json", report.ledger_json())
    out.add("summary.csv", report.summary_csv())
    return out


COMMANDS = {"gen": cmd_gen, "metrics": cmd_metrics, "attack": cmd_attack, "scenario": cmd_scenario}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="papertrust", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="YAML config path, or a bundled sample name: " + ", ".join(BUNDLED))
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _setup_logging(verbosity: int):
    level = os.environ.get("PAPERTRUST_LOG")
    if level is None:
        level = ["WARNING", "INFO", "DEBUG"][min(verbosity, 2)]
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    run = RunConfig(args.command, args.config, args.out, args.seed, max(1, args.workers), args.force)
    try:
        cfg = load_config(run.config_path)
        outputs = COMMANDS[run.command](run, cfg)
        outputs.write()
    except (UsageError, ConfigError, InvalidConfig, InvalidParams, InsufficientPopulation) as exc:
        print(f"papertrust {run.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (PaperTrustError, OSError, ValueError) as exc:
        print(f"papertrust {run.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
