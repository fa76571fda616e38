"""Adversary actions against an authentication system, and the campaign runner.

Each attack returns an :class:`AttackOutcome`.  ``run_cell`` builds a small
default deployment from a seed, mounts one attack with its mitigation on or
off, and reports whether the adversary got through; ``run_campaign``
tabulates cells over seeds.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .authcore import (AuthSystem, DecisionPolicy, TemplateStore, unauthorized_entries,
                       verify_audit)
from .errors import AlignmentFailed, LockedOut, NothingToLeak, StaleNonce
from .features import Pipeline, PufResponse, QuantizerConfig
from .optics import AcquisitionPlan, CaptureSet, EnvironmentModel, acquire, plan_environments
from .surface import NormMap, SurfaceParams, generate_surface

log = logging.getLogger(__name__)


@dataclass
class AttackOutcome:
    name: str
    success: bool
    queries_used: int = 0
    score_trace: Optional[List[float]] = None
    notes: str = ""


# stage 1: sensor / interface ---------------------------------------------------------

def spoof_replay_images(captured: CaptureSet, system: AuthSystem, claimed_id: Optional[str] = None,
                        requester: str = "adversary") -> AttackOutcome:
    """Resubmit eavesdropped images.

    ``captured`` is assumed to have been observed on the wire during a genuine
    session, so with nonce checking on its nonce is already known to the system.
    """
    try:
        result = system.authenticate(captured, claimed_id, requester)
    except StaleNonce:
        return AttackOutcome("replay", False, 1, notes="stale nonce")
    return AttackOutcome("replay", result.accepted, 1)


def dos_marker_tamper(captures: CaptureSet) -> CaptureSet:
    return captures.with_marker_state("tampered")


# stage 3: reference store ----------------------------------------------------------

def leak_template(store: TemplateStore, product_id: str):
    """Insider read of a stored raw template; raises NothingToLeak for digests."""
    return store.raw_template(product_id)


def invert_template(template: NormMap,
                    assumed_env: Union[EnvironmentModel, Sequence[EnvironmentModel]],
                    plan: AcquisitionPlan) -> CaptureSet:
    """Forward-render a leaked norm map into captures under a guessed environment."""
    if isinstance(assumed_env, EnvironmentModel):
        n = len(plan_environments(plan, template.width, template.height))
        envs = (assumed_env,) * n
    else:
        envs = tuple(assumed_env)
    return acquire(template, replace(plan, environments=envs))


def displaced_lights(envs: Sequence[EnvironmentModel], offset: float) -> Tuple[EnvironmentModel, ...]:
    """Camera environments with every light shifted by ``offset`` pixels along x."""
    out = []
    for e in envs:
        x, y, z = e.light_position
        out.append(replace(e, light_position=(x + offset, y, z)))
    return tuple(out)


def malicious_registration(system: AuthSystem, counterfeit: CaptureSet, product_id: str,
                           actor: str = "insider", audit_review: bool = False,
                           authorized: Iterable[str] = ("manufacturer",)) -> AttackOutcome:
    """Insider enrolls a counterfeit, then presents it for authentication.

    Success means the counterfeit authenticates and the write goes unnoticed.
    """
    system.enroll(product_id, counterfeit, actor=actor)
    result = system.authenticate(counterfeit, product_id, requester=actor)
    if not audit_review:
        return AttackOutcome("malicious_registration", result.accepted, 1)
    suspicious = unauthorized_entries(system.store, authorized)
    chain_ok = verify_audit(system.store)
    detected = bool(suspicious) or not chain_ok
    notes = f"unauthorized appends by {sorted({e.actor for e in suspicious})}" if suspicious else ""
    if not chain_ok:
        notes = (notes + "; " if notes else "") + "audit chain broken"
    return AttackOutcome("malicious_registration", result.accepted and not detected, 1, notes=notes)


# stage 4: decision endpoint ---------------------------------------------------------

def hill_climb(store: TemplateStore, policy: DecisionPolicy, claimed_id: str, budget: int,
               length: int, seed: int = 0, max_flips: int = 4,
               requester: str = "adversary") -> AttackOutcome:
    """Iterated local search over binary responses driven by the endpoint's replies.

    With a leaking endpoint the score guides the search; with a binary one the
    only signal is accept/reject, which degenerates to random guessing.
    """
    rng = np.random.default_rng(seed)
    current = rng.integers(0, 2, length).astype(np.uint8)
    sign = 1.0 if policy.higher_is_better else -1.0

    def ask(bits):
        res = store.decide(policy, requester, PufResponse(bits), claimed_id)
        if res.score is not None:
            return res.accepted, sign * res.score
        return res.accepted, 1.0 if res.accepted else 0.0

    trace: List[float] = []
    queries = 0
    try:
        accepted, best = ask(current)
        queries = 1
        trace.append(sign * best if policy.leak_scores else best)
        while not accepted and queries < budget:
            k = int(rng.integers(1, max_flips + 1))
            idx = rng.choice(length, k, replace=False)
            cand = current.copy()
            cand[idx] ^= 1
            accepted, value = ask(cand)
            queries += 1
            if accepted or value > best:
                current, best = cand, value
            trace.append(sign * best if policy.leak_scores else best)
    except LockedOut:
        return AttackOutcome("hill_climb", False, queries, trace, notes="LockedOut")
    return AttackOutcome("hill_climb", bool(accepted), queries, trace)


# default deployment and campaign --------------------------------------------------

ATTACKS = ("replay", "leakage", "inversion", "hill_climb", "malicious_registration")
OPTIONAL_ATTACKS = ("dos",)

# what "mitigation on" means per attack
MITIGATIONS = {
    "replay": "nonces",
    "leakage": "hashed_templates",
    "inversion": "hashed_templates",
    "hill_climb": "no_leak+lockout",
    "malicious_registration": "audit_verification",
    "dos": "qc_flagging",
}


@dataclass(frozen=True)
class DeploymentConfig:
    size: int = 64
    correlation_length: float = 3.0
    slope_scale: float = 0.2
    query_noise: float = 0.01
    pearson_threshold: float = 0.8
    hill_climb_size: int = 32  # 32x32 surface, stride 2, n_x only -> L = 256
    hill_climb_budget: int = 50_000
    hill_climb_threshold: float = 5.0  # l2 on bits: accept within 25 flipped bits of 256
    lockout_budget: int = 1000


def _surface(cfg: DeploymentConfig, seed: int, size: Optional[int] = None) -> NormMap:
    size = size or cfg.size
    return generate_surface(SurfaceParams(size, size, cfg.correlation_length, cfg.slope_scale, seed))


def _system(mode: str, cfg: DeploymentConfig, **kw) -> AuthSystem:
    store = TemplateStore(mode, salt_source=_seeded_salts(kw.pop("salt_seed", 0)))
    policy = DecisionPolicy("pearson", cfg.pearson_threshold)
    return AuthSystem(store, policy, Pipeline(), **kw)


def _seeded_salts(seed: int):
    rng = np.random.default_rng(seed)
    return lambda: rng.bytes(16)


def run_cell(attack: str, mitigated: bool, seed: int, cfg: DeploymentConfig = DeploymentConfig()) -> AttackOutcome:
    """Mount one attack against a freshly built default deployment."""
    rng = np.random.default_rng(seed)
    s_surface, s_enroll, s_query, s_other = (int(x) for x in rng.integers(0, 2**62, 4))
    pid = f"product-{seed}"
    genuine = _surface(cfg, s_surface)
    enroll_caps = acquire(genuine, AcquisitionPlan(seed=s_enroll))
    query_plan = AcquisitionPlan(noise=cfg.query_noise, seed=s_query)

    if attack == "replay":
        system = _system("plain", cfg, nonce_check=mitigated)
        system.enroll(pid, enroll_caps, actor="manufacturer")
        observed = acquire(genuine, query_plan)
        system.authenticate(observed, pid, requester="owner")  # the session being eavesdropped
        return spoof_replay_images(observed, system, pid)

    if attack in ("leakage", "inversion"):
        system = _system("hashed" if mitigated else "plain", cfg, salt_seed=s_other)
        system.enroll(pid, enroll_caps, actor="manufacturer")
        try:
            leaked = leak_template(system.store, pid)
        except NothingToLeak:
            return AttackOutcome(attack, False, 0, notes="NothingToLeak")
        if attack == "leakage":
            res = system.store.decide(system.policy, "adversary", leaked, pid)
            return AttackOutcome(attack, res.accepted, 1)
        synthetic = invert_template(leaked, EnvironmentModel(), AcquisitionPlan(seed=s_other))
        res = system.authenticate(synthetic, pid, requester="adversary")
        return AttackOutcome(attack, res.accepted, 1)

    if attack == "hill_climb":
        q = QuantizerConfig(components=("nx",), downsample_stride=2)
        store = TemplateStore("plain", quantizer=q)
        target = Pipeline(q).response(acquire(_surface(cfg, s_surface, cfg.hill_climb_size),
                                              AcquisitionPlan(seed=s_enroll)))
        store.register(pid, target, actor="manufacturer")
        policy = DecisionPolicy("l2", cfg.hill_climb_threshold, leak_scores=not mitigated,
                                lockout_budget=cfg.lockout_budget if mitigated else None)
        return hill_climb(store, policy, pid, cfg.hill_climb_budget, target.length, seed=s_other)

    if attack == "malicious_registration":
        system = _system("plain", cfg)
        system.enroll(pid, enroll_caps, actor="manufacturer")
        fake = _surface(cfg, s_other)
        return malicious_registration(system, acquire(fake, AcquisitionPlan(seed=s_query)),
                                      f"counterfeit-{seed}", audit_review=mitigated)

    if attack == "dos":
        system = _system("plain", cfg, qc_flagging=mitigated)
        system.enroll(pid, enroll_caps, actor="manufacturer")
        tampered = dos_marker_tamper(acquire(genuine, query_plan))
        try:
            system.authenticate(tampered, pid)
        except AlignmentFailed:
            pass
        flagged = bool(system.manual_inspection)
        return AttackOutcome("dos", not flagged, 1,
                             notes=f"availability={system.availability:.3f}"
                                   + ("; routed to manual inspection" if flagged else ""))

    raise ValueError(f"unknown attack {attack!r}")


@dataclass
class CampaignResult:
    rows: List[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "mitigation", "mitigated", "seed", "success", "queries_used", "notes"])
        for r in self.rows:
            w.writerow([r["attack"], r["mitigation"], int(r["mitigated"]), r["seed"],
                        int(r["success"]), r["queries_used"], r["notes"]])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {}
        for r in self.rows:
            cell = out.setdefault(r["attack"], {"mitigation": r["mitigation"]})
            key = "mitigated" if r["mitigated"] else "unmitigated"
            stats = cell.setdefault(key, {"runs": 0, "successes": 0})
            stats["runs"] += 1
            stats["successes"] += int(r["success"])
        for cell in out.values():
            for key in ("mitigated", "unmitigated"):
                if key in cell:
                    cell[key]["success_rate"] = cell[key]["successes"] / cell[key]["runs"]
            # a cell is correct when the attack always lands unmitigated and never lands mitigated
            cell["correct"] = (cell.get("unmitigated", {}).get("success_rate") == 1.0
                               and cell.get("mitigated", {}).get("success_rate") == 0.0)
        return out

    def cells_correct(self) -> Tuple[int, int]:
        """(correct, total) over attack x mitigation cells."""
        s = self.summary()
        correct = sum(2 * c["correct"] for c in s.values())
        return correct, sum(("mitigated" in c) + ("unmitigated" in c) for c in s.values())

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2)


def _run_row(args):
    attack, mitigated, seed, cfg = args
    o = run_cell(attack, mitigated, seed, cfg)
    return {"attack": attack, "mitigation": MITIGATIONS[attack], "mitigated": mitigated,
            "seed": seed, "success": bool(o.success), "queries_used": o.queries_used, "notes": o.notes}


def run_campaign(attacks: Sequence[str] = ATTACKS, seeds: Sequence[int] = (0,),
                 mitigations: Sequence[bool] = (False, True), cfg: DeploymentConfig = DeploymentConfig(),
                 workers: int = 1) -> CampaignResult:
    for a in attacks:
        if a not in MITIGATIONS:
            raise ValueError(f"unknown attack {a!r}")
    jobs = [(a, m, s, cfg) for a in attacks for m in mitigations for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_row, jobs))
    else:
        rows = [_run_row(j) for j in jobs]
    return CampaignResult(rows)
