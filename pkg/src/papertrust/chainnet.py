"""Supply-chain network simulation: peers, a hash-chained ledger with
round-robin consensus, mutual authentication of local checks, and the
client-server / peer-to-peer / hybrid scenario archetypes.

Everything runs on one deterministic discrete-event loop.  Logical time is
the network tick counter; there is no wall clock anywhere.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .authcore import AuthSystem, DecisionPolicy, TemplateStore, hash_template
from .errors import ConfigError, NoQuorum, StaleNonce, UnknownProduct
from .features import Pipeline, QuantizerConfig
from .optics import AcquisitionPlan, CaptureSet, acquire
from .surface import NormMap, SurfaceParams, generate_surface

log = logging.getLogger(__name__)

TX_TYPES = ("register", "authenticate", "sign_off", "flag")
ROLES = ("manufacturer", "distributor", "retailer", "server")
BEHAVIORS = ("honest", "invert_votes", "bad_proposer", "counterfeiter")
ARCHETYPES = ("client_server", "p2p", "hybrid")
GENESIS = "0" * 64
SCHEMA_VERSION = 1


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ledger ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    type: str
    actor: str
    payload: Tuple[Tuple[str, Any], ...]  # sorted items; kept hashable
    nonce: int
    timestamp: int

    @classmethod
    def make(cls, type_: str, actor: str, payload: dict, nonce: int, timestamp: int) -> "Transaction":
        if type_ not in TX_TYPES:
            raise ValueError(f"unknown transaction type {type_!r}")
        return cls(type_, actor, tuple(sorted(payload.items())), nonce, timestamp)

    @property
    def data(self) -> dict:
        return dict(self.payload)

    @property
    def payload_digest(self) -> str:
        return sha256_hex(canonical_json(self.data))

    def to_dict(self) -> dict:
        return {"type": self.type, "actor": self.actor, "payload": self.data,
                "payload_digest": self.payload_digest, "nonce": self.nonce, "timestamp": self.timestamp}


@dataclass(frozen=True)
class Block:
    height: int
    prev_digest: str
    transactions: Tuple[Transaction, ...]
    proposer: str
    digest: str

    @staticmethod
    def compute_digest(height, prev_digest, transactions, proposer) -> str:
        body = {"height": height, "prev": prev_digest, "proposer": proposer,
                "txs": [t.to_dict() for t in transactions]}
        return sha256_hex(canonical_json(body))

    @classmethod
    def build(cls, height, prev_digest, transactions, proposer) -> "Block":
        txs = tuple(transactions)
        return cls(height, prev_digest, txs, proposer, cls.compute_digest(height, prev_digest, txs, proposer))

    def recompute(self) -> str:
        return self.compute_digest(self.height, self.prev_digest, self.transactions, self.proposer)

    def to_dict(self) -> dict:
        return {"height": self.height, "prev_digest": self.prev_digest, "proposer": self.proposer,
                "digest": self.digest, "transactions": [t.to_dict() for t in self.transactions]}

    @classmethod
    def from_dict(cls, d: dict) -> "Block":
        txs = tuple(Transaction.make(t["type"], t["actor"], t["payload"], t["nonce"], t["timestamp"])
                    for t in d["transactions"])
        return cls(d["height"], d["prev_digest"], txs, d["proposer"], d["digest"])


def first_invalid_block(chain: Sequence[Block]) -> Optional[int]:
    prev = GENESIS
    for i, b in enumerate(chain):
        if b.height != i or b.prev_digest != prev or b.recompute() != b.digest:
            return i
        prev = b.digest
    return None


@dataclass(frozen=True)
class ConsensusConfig:
    scheme: str = "round_robin"
    mutual_auth_period: int = 1  # M
    quorum: float = 2 / 3

    def __post_init__(self):
        if self.scheme != "round_robin":
            raise ConfigError("only round_robin consensus is supported")
        if self.mutual_auth_period < 1:
            raise ConfigError("mutual authentication period M must be >= 1")
        if not 0.5 < self.quorum <= 1:
            raise ConfigError("quorum must lie in (0.5, 1]")

    def votes_needed(self, n: int) -> int:
        return math.ceil(self.quorum * n - 1e-12)


# network --------------------------------------------------------------------------

@dataclass(frozen=True)
class Message:
    sender: str
    to: str
    kind: str
    payload: Any
    nonce: int
    timestamp: int
    size: int


class Node:
    def __init__(self, node_id: str, role: str, behavior: str = "honest", region: str = "default",
                 pipeline: Optional[Pipeline] = None):
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")
        if behavior not in BEHAVIORS:
            raise ConfigError(f"unknown behavior {behavior!r}")
        self.node_id = node_id
        self.role = role
        self.behavior = behavior
        self.region = region
        self.pipeline = pipeline or Pipeline()
        self.chain: List[Block] = []
        self.flagged = False
        self.seen: set = set()            # (sender, nonce) of delivered messages
        self.capture_nonces: set = set()  # capture sets already presented for mutual auth
        self.rejected_duplicates = 0
        self.references: Dict[str, Tuple[bytes, bytes]] = {}  # product -> (salt, digest)
        self.flagged_nodes: set = set()
        self.inbox: List[Message] = []

    @property
    def honest(self) -> bool:
        return self.behavior == "honest"

    @property
    def head(self) -> str:
        return self.chain[-1].digest if self.chain else GENESIS

    def append_block(self, block: Block):
        self.chain.append(block)
        for tx in block.transactions:
            d = tx.data
            if tx.type == "register":
                self.references[d["product"]] = (bytes.fromhex(d["salt"]), bytes.fromhex(d["digest"]))
            elif tx.type == "flag" and d.get("prover"):
                self.flagged_nodes.add(d["prover"])

    def reference(self, product_id: str) -> Tuple[bytes, bytes]:
        try:
            return self.references[product_id]
        except KeyError:
            raise UnknownProduct(product_id) from None

    def local_digest(self, captures: CaptureSet, salt: bytes) -> bytes:
        return hash_template(self.pipeline.response(captures), salt)

    def validate_block(self, block: Block, expected_proposer: str, mempool: Dict[Tuple[str, int], Transaction]) -> bool:
        if block.height != len(self.chain) or block.prev_digest != self.head:
            return False
        if block.proposer != expected_proposer or block.recompute() != block.digest:
            return False
        for tx in block.transactions:
            if mempool.get((tx.actor, tx.nonce)) != tx:
                return False
        return True

    def deliver(self, msg: Message) -> bool:
        key = (msg.sender, msg.nonce)
        if key in self.seen:
            self.rejected_duplicates += 1
            return False
        self.seen.add(key)
        self.inbox.append(msg)
        return True


class Network:
    """Reliable, ordered delivery with a fixed per-link delay in ticks."""

    def __init__(self, nodes: Sequence[Node], consensus: ConsensusConfig = ConsensusConfig(),
                 link_delay: int = 1, seed: int = 0, validators: Optional[Sequence[str]] = None):
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError("node ids must be unique")
        self.nodes: Dict[str, Node] = {n.node_id: n for n in sorted(nodes, key=lambda n: n.node_id)}
        self.consensus = consensus
        self.link_delay = link_delay
        self.validators = sorted(validators) if validators else sorted(self.nodes)
        self.clock = 0
        self.round = 0
        self.pending: List[Transaction] = []
        self._queue: list = []
        self._seq = 0
        self._rng = np.random.default_rng(seed)
        self.messages: Dict[str, int] = {}
        self.bytes: Dict[str, int] = {}
        self.log: List[Message] = []
        self.failed_rounds = 0

    # plumbing ---------------------------------------------------------------

    def fresh_nonce(self) -> int:
        return int(self._rng.integers(0, 2**63))

    def send(self, sender: str, to: str, kind: str, payload: Any, size: int) -> Message:
        msg = Message(sender, to, kind, payload, self.fresh_nonce(), self.clock, size)
        self._enqueue(msg)
        self.messages[kind] = self.messages.get(kind, 0) + 1
        self.bytes[kind] = self.bytes.get(kind, 0) + size
        return msg

    def broadcast(self, sender: str, kind: str, payload: Any, size: int, to: Optional[Sequence[str]] = None):
        targets = [n for n in (to or self.nodes) if n != sender]
        return [self.send(sender, t, kind, payload, size) for t in targets]

    def _enqueue(self, msg: Message):
        heapq.heappush(self._queue, (self.clock + self.link_delay, self._seq, msg))
        self._seq += 1

    def run(self) -> List[Message]:
        """Deliver everything queued; returns accepted messages in delivery order."""
        delivered = []
        while self._queue:
            t, _, msg = heapq.heappop(self._queue)
            self.clock = max(self.clock, t)
            self.log.append(msg)
            if self.nodes[msg.to].deliver(msg):
                delivered.append(msg)
        return delivered

    def replay(self, msg: Message):
        """Re-inject a recorded message verbatim (adversarial rebroadcast)."""
        self._enqueue(msg)

    def submit(self, tx_type: str, actor: str, payload: dict) -> Transaction:
        tx = Transaction.make(tx_type, actor, payload, self.fresh_nonce(), self.clock)
        self.pending.append(tx)
        return tx

    def honest_nodes(self) -> List[Node]:
        return [n for n in self.nodes.values() if n.honest]

    def proposer_for_round(self, round_no: int) -> str:
        return self.validators[round_no % len(self.validators)]


def _forged_block(node: Node, pending: Sequence[Transaction], clock: int) -> Block:
    forged = Transaction.make("register", node.node_id,
                              {"product": "forged", "salt": "00" * 16, "digest": "00" * 32}, 0, clock)
    return Block.build(len(node.chain), node.head, tuple(pending) + (forged,), node.node_id)


def run_consensus_round(network: Network) -> Block:
    """One round-robin round over the pending transactions.

    Raises NoQuorum when the proposal gathers fewer votes than the quorum;
    the transactions stay pending and the next round rotates the proposer.
    """
    if not network.pending:
        raise ValueError("no pending transactions")
    proposer = network.nodes[network.proposer_for_round(network.round)]
    network.round += 1
    pending = tuple(network.pending)
    mempool = {(t.actor, t.nonce): t for t in pending}
    if proposer.behavior == "bad_proposer":
        block = _forged_block(proposer, pending, network.clock)
    else:
        block = Block.build(len(proposer.chain), proposer.head, pending, proposer.node_id)
    size = len(canonical_json(block.to_dict()))
    network.broadcast(proposer.node_id, "proposal", block, size, to=network.validators)
    network.run()

    verdicts: Dict[str, bool] = {}
    yes = 0
    for vid in network.validators:
        node = network.nodes[vid]
        valid = node.validate_block(block, proposer.node_id, mempool)
        if node.behavior == "invert_votes":
            vote = not valid
        elif node.behavior == "bad_proposer" and vid == proposer.node_id:
            vote = True
        else:
            vote = valid
        verdicts[vid] = valid
        yes += vote
        if vid != proposer.node_id:
            network.send(vid, proposer.node_id, "vote", (block.digest, vote), 41)
    network.run()

    if yes < network.consensus.votes_needed(len(network.validators)):
        network.failed_rounds += 1
        raise NoQuorum(f"block {block.height} from {proposer.node_id}: {yes}/{len(network.validators)} votes")

    network.broadcast(proposer.node_id, "commit", block.digest, 32, to=network.validators)
    network.run()
    for vid in network.validators:
        node = network.nodes[vid]
        # honest replicas only extend with blocks they validated themselves
        if verdicts[vid] or not node.honest:
            node.append_block(block)
    included = {(t.actor, t.nonce) for t in block.transactions}
    network.pending = [t for t in network.pending if (t.actor, t.nonce) not in included]
    return block


def verify_chain(node: Node) -> bool:
    return first_invalid_block(node.chain) is None


def replicas_identical(nodes: Sequence[Node]) -> bool:
    blobs = {canonical_json([b.to_dict() for b in n.chain]) for n in nodes}
    return len(blobs) <= 1


# mutual authentication ---------------------------------------------------------

@dataclass
class MutualAuthVerdict:
    product_id: str
    prover: str
    accepted: bool
    votes_for: int
    votes_against: int
    bytes_sent: int
    honest_votes: Dict[str, bool] = field(default_factory=dict)


def mutual_authenticate(network: Network, prover: Node, captures: CaptureSet, product_id: str,
                        commit: bool = True) -> MutualAuthVerdict:
    """The prover shares (images, hashed code); every node recomputes and votes.

    Verifiers are all validators (the prover included).  Each computes
    B = [H(phi(f(x_q))) == on-chain reference]; honest nodes vote B.  The
    verdict is the quorum over votes: accept -> sign-off transactions,
    reject -> the prover is flagged.
    """
    salt, reference = prover.reference(product_id)
    if prover.behavior == "counterfeiter":
        claimed = reference
    else:
        claimed = prover.local_digest(captures, salt)

    for vid in network.validators:
        if captures.nonce in network.nodes[vid].capture_nonces and network.nodes[vid].honest:
            raise StaleNonce(f"capture set {captures.nonce} was already presented")

    bytes_before = network.bytes.get("mutual_auth", 0) + network.bytes.get("auth_vote", 0)
    size = captures.nbytes() + len(claimed) + len(product_id.encode())
    network.broadcast(prover.node_id, "mutual_auth", (product_id, captures, claimed.hex()), size,
                      to=network.validators)
    network.run()

    votes: Dict[str, bool] = {}
    honest_votes: Dict[str, bool] = {}
    for vid in network.validators:
        node = network.nodes[vid]
        node.capture_nonces.add(captures.nonce)
        salt_i, ref_i = node.reference(product_id)
        b = node.local_digest(captures, salt_i) == ref_i
        if node.behavior == "invert_votes":
            vote = not b
        elif node.behavior == "counterfeiter" and vid == prover.node_id:
            vote = True
        else:
            vote = b
        votes[vid] = vote
        if node.honest:
            honest_votes[vid] = b
        if vid != prover.node_id:
            network.send(vid, prover.node_id, "auth_vote", (product_id, vote), 41)
    network.run()
    sent = network.bytes.get("mutual_auth", 0) + network.bytes.get("auth_vote", 0) - bytes_before

    yes = sum(votes.values())
    accepted = yes >= network.consensus.votes_needed(len(votes))
    network.submit("authenticate", prover.node_id,
                   {"product": product_id, "claimed": claimed.hex(), "capture_nonce": captures.nonce})
    if accepted:
        for vid, v in votes.items():
            if v:
                network.submit("sign_off", vid, {"product": product_id, "prover": prover.node_id})
    else:
        flagger = next(vid for vid, v in votes.items() if not v)
        network.submit("flag", flagger, {"product": product_id, "prover": prover.node_id,
                                         "votes_for": yes, "votes_against": len(votes) - yes})
        prover.flagged = True
    if commit:
        _commit_pending(network)
    return MutualAuthVerdict(product_id, prover.node_id, accepted, yes, len(votes) - yes, sent, honest_votes)


def _commit_pending(network: Network, max_attempts: Optional[int] = None) -> Optional[Block]:
    attempts = max_attempts or len(network.validators)
    for _ in range(attempts):
        if not network.pending:
            return None
        try:
            return run_consensus_round(network)
        except NoQuorum as exc:
            log.info("consensus round failed: %s", exc)
    return None


# scenarios ------------------------------------------------------------------------

@dataclass
class NodeSpec:
    id: str
    role: str
    behavior: str = "honest"
    region: str = "default"


@dataclass
class ProductSpec:
    id: str
    route: List[str]
    dwell: int = 1  # cycles spent at each node before the next hand-off
    start: int = 1  # cycle of the first hand-off


@dataclass
class AttackSpec:
    kind: str  # "counterfeit"
    product: str
    cycle: int
    node: Optional[str] = None


@dataclass
class ScenarioConfig:
    archetype: str
    nodes: List[NodeSpec]
    products: List[ProductSpec]
    attacks: List[AttackSpec] = field(default_factory=list)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    noise: float = 0.0
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    surface_size: int = 64
    cycles: int = 10
    seed: int = 0
    link_delay: int = 1
    regions: Dict[str, str] = field(default_factory=dict)
    name: str = "scenario"

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        try:
            version = d.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise ConfigError(f"unsupported schema_version {version}")
            nodes = [NodeSpec(**n) for n in d["nodes"]]
            products = []
            for p in d["products"]:
                if "count" in p:
                    prefix = p.get("prefix", "P")
                    extra = {k: int(p[k]) for k in ("dwell", "start") if k in p}
                    products += [ProductSpec(f"{prefix}{i:03d}", list(p["route"]), **extra)
                                 for i in range(1, p["count"] + 1)]
                else:
                    products.append(ProductSpec(**p))
            attacks = [AttackSpec(**a) for a in d.get("attacks", [])]
            c = d.get("consensus", {})
            consensus = ConsensusConfig(mutual_auth_period=int(c.get("M", 1)), quorum=float(c.get("quorum", 2 / 3)))
            pipe = d.get("pipeline", {})
            q = pipe.get("quantizer", {})
            quantizer = QuantizerConfig(q.get("scheme", "sign"), tuple(q.get("components", ("nx", "ny"))),
                                        int(q.get("downsample_stride", 2)))
            quantizer.validate()
            cfg = cls(archetype=d["archetype"], nodes=nodes, products=products, attacks=attacks,
                      consensus=consensus, noise=float(pipe.get("noise", 0.0)), quantizer=quantizer,
                      surface_size=int(pipe.get("surface_size", 64)), cycles=int(d.get("cycles", 10)),
                      seed=int(d.get("seed", 0)), link_delay=int(d.get("network", {}).get("link_delay", 1)),
                      regions=dict(d.get("regions", {})), name=d.get("name", "scenario"))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario config: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.archetype not in ARCHETYPES:
            raise ConfigError(f"unknown archetype {self.archetype!r}")
        ids = {n.id for n in self.nodes}
        for n in self.nodes:
            if n.role not in ROLES or n.behavior not in BEHAVIORS:
                raise ConfigError(f"node {n.id}: bad role or behavior")
        servers = [n for n in self.nodes if n.role == "server"]
        if self.archetype == "client_server" and len(servers) != 1:
            raise ConfigError("client_server needs exactly one server node (the registration authority)")
        if self.archetype == "hybrid":
            if not self.regions or any(a not in ("client_server", "p2p") for a in self.regions.values()):
                raise ConfigError("hybrid scenarios map every region to client_server or p2p")
            if any(n.region not in self.regions for n in self.nodes):
                raise ConfigError("every node region must appear in regions")
            if "client_server" in self.regions.values() and len(servers) != 1:
                raise ConfigError("client_server regions need exactly one server node")
        if not any(n.role == "manufacturer" for n in self.nodes):
            raise ConfigError("a manufacturer node is required")
        for p in self.products:
            if not p.route or any(r not in ids for r in p.route):
                raise ConfigError(f"product {p.id}: route names unknown nodes")
            if p.dwell < 1 or p.start < 1:
                raise ConfigError(f"product {p.id}: dwell and start must be >= 1")
        pids = {p.id for p in self.products}
        for a in self.attacks:
            if a.kind != "counterfeit" or a.product not in pids or a.cycle < 1:
                raise ConfigError(f"bad attack entry {a}")
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")

    def region_archetype(self, region: str) -> str:
        if self.archetype == "hybrid":
            return self.regions[region]
        return self.archetype


@dataclass
class _Item:
    spec: ProductSpec
    surface: NormMap
    genuine: bool = True
    hop: int = 0
    status: str = "in_transit"  # in_transit | delivered | quarantined
    dirty: bool = True         # awaiting mutual authentication
    needs_local: bool = False  # awaiting the holder's local check
    next_handoff: int = 1
    injected_at: Optional[int] = None
    detected_at: Optional[int] = None


@dataclass
class ScenarioReport:
    name: str
    archetype: str
    events: List[dict]
    products: Dict[str, dict]
    detected_malicious: List[str]
    detections: List[dict]
    messages: Dict[str, int]
    bytes: Dict[str, int]
    region_archetypes: Dict[str, str]
    chains_valid: bool
    replicas_identical: bool
    oracle_agreement: bool
    failed_rounds: int
    ledger: List[dict]

    def to_dict(self) -> dict:
        return {
            "name": self.name, "archetype": self.archetype, "events": self.events,
            "products": self.products, "detected_malicious": self.detected_malicious,
            "detections": self.detections, "messages": self.messages, "bytes": self.bytes,
            "region_archetypes": self.region_archetypes, "chains_valid": self.chains_valid,
            "replicas_identical": self.replicas_identical, "oracle_agreement": self.oracle_agreement,
            "failed_rounds": self.failed_rounds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def ledger_json(self) -> str:
        return json.dumps(self.ledger, sort_keys=True, indent=2)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["product", "status", "genuine", "authentications", "rejections", "flags",
                    "injected_at", "detected_at"])
        for pid in sorted(self.products):
            p = self.products[pid]
            w.writerow([pid, p["status"], int(p["genuine"]), p["authentications"], p["rejections"],
                        p["flags"], "" if p["injected_at"] is None else p["injected_at"],
                        "" if p["detected_at"] is None else p["detected_at"]])
        return buf.getvalue()

    @property
    def flag_events(self) -> List[dict]:
        return [tx for b in self.ledger for tx in b["transactions"] if tx["type"] == "flag"]


class _Scenario:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        pipeline = Pipeline(quantizer=cfg.quantizer)
        self.pipeline = pipeline
        nodes = [Node(n.id, n.role, n.behavior, n.region, pipeline) for n in cfg.nodes]
        self.server = next((n for n in nodes if n.role == "server"), None)
        validators = [self.server.node_id] if cfg.archetype == "client_server" else None
        self.net = Network(nodes, cfg.consensus, cfg.link_delay, seed=int(self.rng.integers(2**62)),
                           validators=validators)
        self.manufacturer = next(n for n in nodes if n.role == "manufacturer")
        self.events: List[dict] = []
        self.detections: List[dict] = []
        self.oracle_ok = True
        self.server_system = None
        if self.server is not None:
            store = TemplateStore("hashed", quantizer=cfg.quantizer, salt_source=self._salt)
            self.server_system = AuthSystem(store, DecisionPolicy("hamming", 0.0), pipeline,
                                            use_norm_map=False, nonce_check=True)
        self.items: Dict[str, _Item] = {}
        for p in cfg.products:
            self.items[p.id] = _Item(p, self._new_surface(), next_handoff=p.start)
        self.history: Dict[str, List[dict]] = {p.id: [] for p in cfg.products}

    def _salt(self) -> bytes:
        return self.rng.bytes(16)

    def _new_surface(self) -> NormMap:
        s = self.cfg.surface_size
        return generate_surface(SurfaceParams(s, s, 3.0, 0.2, int(self.rng.integers(2**62))))

    def _capture(self, item: _Item, noise: Optional[float] = None) -> CaptureSet:
        plan = AcquisitionPlan(noise=self.cfg.noise if noise is None else noise,
                               seed=int(self.rng.integers(2**62)))
        return acquire(item.surface, plan)

    def _event(self, cycle: int, kind: str, **fields):
        ev = {"cycle": cycle, "tick": self.net.clock, "event": kind, **fields}
        self.events.append(ev)
        if "product" in fields:
            self.history[fields["product"]].append(ev)

    def _archetype_of(self, node_id: str) -> str:
        return self.cfg.region_archetype(self.net.nodes[node_id].region)

    # phases ------------------------------------------------------------------

    def register_all(self):
        m = self.manufacturer
        for pid, item in self.items.items():
            caps = self._capture(item, noise=0.0)
            salt = self._salt()
            digest = hash_template(self.pipeline.response(caps), salt)
            if self.server_system is not None:
                self.net.send(m.node_id, self.server.node_id, "register_request", pid, caps.nbytes())
                self.net.run()
                self.server_system.enroll(pid, caps, actor=self.server.node_id)
            actor = self.server.node_id if self.cfg.archetype == "client_server" else m.node_id
            self.net.submit("register", actor, {"product": pid, "salt": salt.hex(), "digest": digest.hex(),
                                                "quantizer": self.cfg.quantizer.to_dict()})
            self._event(0, "register", product=pid, node=actor)
        _commit_pending(self.net)

    def _quarantine(self, item: _Item, cycle: int, detector: str, via: str, prover: Optional[str] = None):
        item.status = "quarantined"
        item.dirty = False
        item.detected_at = cycle
        self.detections.append({"product": item.spec.id, "cycle": cycle, "detector": detector, "via": via,
                                "prover": prover, "injected_at": item.injected_at,
                                "genuine": item.genuine})

    def _local_check(self, item: _Item, holder: Node, cycle: int):
        pid = item.spec.id
        arche = self._archetype_of(holder.node_id)
        caps = self._capture(item)
        if arche == "client_server":
            self.net.send(holder.node_id, self.server.node_id, "auth_request", pid, caps.nbytes())
            self.net.run()
            res = self.server_system.authenticate(caps, pid, requester=holder.node_id)
            self.net.send(self.server.node_id, holder.node_id, "auth_response", res.accepted, 9)
            self.net.run()
            accepted = res.accepted
            self.net.submit("authenticate", self.server.node_id,
                            {"product": pid, "holder": holder.node_id, "accepted": accepted})
            self._event(cycle, "server_check", product=pid, node=holder.node_id, accepted=accepted)
            self._check_oracle(item, accepted)
            if not accepted:
                self.net.submit("flag", self.server.node_id, {"product": pid, "holder": holder.node_id})
                self._quarantine(item, cycle, self.server.node_id, "server")
            else:
                item.dirty = False
            return
        # p2p: local decision by the holder itself
        if holder.behavior == "counterfeiter":
            accepted = True
        else:
            salt, ref = holder.reference(pid)
            accepted = holder.local_digest(caps, salt) == ref
        self._event(cycle, "local_check", product=pid, node=holder.node_id, accepted=accepted)
        if not accepted and holder.honest:
            self.net.submit("flag", holder.node_id, {"product": pid, "holder": holder.node_id})
            self._quarantine(item, cycle, holder.node_id, "local")

    def _check_oracle(self, item: _Item, verdict: bool):
        truth = self.pipeline.response(acquire(item.surface, AcquisitionPlan())) == \
            self.pipeline.response(acquire(self._reference_surface(item), AcquisitionPlan()))
        if truth != verdict:
            self.oracle_ok = False

    def _reference_surface(self, item: _Item) -> NormMap:
        return self._genuine[item.spec.id]

    def mutual_round(self, cycle: int):
        for pid in sorted(self.items):
            item = self.items[pid]
            if not item.dirty or item.status == "quarantined":
                continue
            holder = self.net.nodes[item.spec.route[item.hop]]
            if self._archetype_of(holder.node_id) != "p2p":
                continue
            caps = self._capture(item)
            verdict = mutual_authenticate(self.net, holder, caps, pid, commit=False)
            self._event(cycle, "mutual_auth", product=pid, node=holder.node_id, accepted=verdict.accepted,
                        votes_for=verdict.votes_for, votes_against=verdict.votes_against,
                        bytes=verdict.bytes_sent)
            self._check_oracle(item, verdict.accepted)
            item.dirty = False
            if not verdict.accepted:
                self._quarantine(item, cycle, "consensus", "mutual_auth", prover=holder.node_id)

    def run(self) -> ScenarioReport:
        cfg = self.cfg
        self._genuine = {pid: it.surface for pid, it in self.items.items()}
        self.register_all()
        attacks = sorted(cfg.attacks, key=lambda a: (a.cycle, a.product))
        for cycle in range(1, cfg.cycles + 1):
            for pid in sorted(self.items):
                item = self.items[pid]
                if (item.status == "in_transit" and item.hop + 1 < len(item.spec.route)
                        and cycle >= item.next_handoff):
                    item.hop += 1
                    item.next_handoff = cycle + item.spec.dwell
                    item.dirty = item.needs_local = True
                    frm, to = item.spec.route[item.hop - 1], item.spec.route[item.hop]
                    self.net.send(frm, to, "handoff", pid, 16)
                    self._event(cycle, "handoff", product=pid, node=to, source=frm)
            self.net.run()
            for a in attacks:
                if a.cycle != cycle:
                    continue
                item = self.items[a.product]
                if item.status == "quarantined":
                    continue
                holder = item.spec.route[item.hop]
                if a.node is not None and a.node != holder:
                    raise ConfigError(f"attack on {a.product} at cycle {cycle}: held by {holder}, not {a.node}")
                item.surface = self._new_surface()
                item.genuine = False
                item.injected_at = cycle
                item.dirty = item.needs_local = True
                self._event(cycle, "counterfeit_substitution", product=a.product, node=holder)
            for pid in sorted(self.items):
                item = self.items[pid]
                if item.needs_local and item.status != "quarantined":
                    item.needs_local = False
                    self._local_check(item, self.net.nodes[item.spec.route[item.hop]], cycle)
            if cfg.archetype != "client_server" and cycle % cfg.consensus.mutual_auth_period == 0:
                self.mutual_round(cycle)
            for item in self.items.values():
                if item.status == "in_transit" and item.hop + 1 == len(item.spec.route):
                    item.status = "delivered"
            _commit_pending(self.net)
        return self._report()

    def _report(self) -> ScenarioReport:
        net = self.net
        validators = [net.nodes[v] for v in net.validators]
        honest = [n for n in validators if n.honest]
        ref = honest[0] if honest else validators[0]
        products = {}
        for pid, item in self.items.items():
            hist = self.history[pid]
            checks = [e for e in hist if e["event"] in ("server_check", "local_check", "mutual_auth")]
            products[pid] = {
                "status": item.status, "genuine": item.genuine,
                "authentications": sum(1 for e in checks if e["accepted"]),
                "rejections": sum(1 for e in checks if not e["accepted"]),
                "flags": sum(1 for d in self.detections if d["product"] == pid),
                "injected_at": item.injected_at, "detected_at": item.detected_at,
                "history": hist,
            }
        malicious = sorted({d["prover"] for d in self.detections if d["prover"]})
        regions = {n.node_id: self.cfg.region_archetype(n.region) for n in net.nodes.values()}
        return ScenarioReport(
            name=self.cfg.name, archetype=self.cfg.archetype, events=self.events, products=products,
            detected_malicious=malicious, detections=self.detections,
            messages=dict(sorted(net.messages.items())), bytes=dict(sorted(net.bytes.items())),
            region_archetypes=regions, chains_valid=all(verify_chain(n) for n in honest),
            replicas_identical=replicas_identical(honest), oracle_agreement=self.oracle_ok,
            failed_rounds=net.failed_rounds, ledger=[b.to_dict() for b in ref.chain],
        )


def run_scenario(config: ScenarioConfig, return_network: bool = False):
    config.validate()
    sc = _Scenario(config)
    report = sc.run()
    return (report, sc.net) if return_network else report
