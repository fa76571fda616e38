"""Reference store, template protection, similarity search and decisions.

The store keeps one record per registered product.  Depending on its mode a
record holds the raw feature (``plain``), a salted SHA-256 digest of the
quantized feature (``hashed``) or the raw response indexed by bit-sampling
LSH for ID-less lookups (``lsh``).  Every mutation, and every decision,
appends one entry to a hash-chained audit ledger before returning.
"""
from __future__ import annotations

import hashlib
import json
import secrets
import struct
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (AlignmentFailed, DimensionMismatch, DuplicateId, InvalidParams, LockedOut,
                     NothingToLeak, StaleNonce, UnknownId, WrongMode, ZeroVariance)
from .features import Pipeline, PufResponse, QuantizerConfig, quantize
from .pufmetrics import pearson
from .surface import NormMap

Feature = Union[PufResponse, NormMap, np.ndarray]

SALT_BYTES = 16
GENESIS_DIGEST = "0" * 64
STORE_MODES = ("plain", "hashed", "lsh")


# canonical serialization and hashing --------------------------------------------

def canonical_bytes(feature: Feature) -> bytes:
    if isinstance(feature, PufResponse):
        return b"PUFR" + feature.canonical_bytes()
    if isinstance(feature, NormMap):
        return feature.to_bytes()
    arr = np.asarray(feature, dtype="<f8")
    return b"VEC1" + struct.pack("<I", arr.size) + arr.ravel().tobytes()


def hash_template(feature: Feature, salt: bytes) -> bytes:
    """SHA-256 over salt || canonical feature bytes."""
    if len(salt) != SALT_BYTES:
        raise InvalidParams(f"salt must be {SALT_BYTES} bytes")
    return hashlib.sha256(salt + canonical_bytes(feature)).digest()


def feature_vector(feature: Feature) -> np.ndarray:
    if isinstance(feature, PufResponse):
        return feature.bits.astype(np.float64)
    if isinstance(feature, NormMap):
        return np.concatenate([feature.nx.ravel(), feature.ny.ravel()])
    return np.asarray(feature, dtype=np.float64).ravel()


def feature_signature(feature: Feature) -> Tuple:
    if isinstance(feature, PufResponse):
        return ("response", feature.length)
    if isinstance(feature, NormMap):
        return ("normmap", feature.height, feature.width)
    return ("vector", np.asarray(feature).size)


def repetition_encode(r: PufResponse) -> PufResponse:
    """Majority vote over consecutive bit triples (a trailing partial triple is dropped)."""
    n = (r.length // 3) * 3
    if n == 0:
        raise InvalidParams("response too short for the repetition stabilizer")
    triples = r.bits[:n].reshape(-1, 3)
    return PufResponse((triples.sum(axis=1) >= 2).astype(np.uint8), r.origin)


# audit ledger -----------------------------------------------------------------------

@dataclass(frozen=True)
class AuditEntry:
    seq: int
    action: str
    actor: str
    payload_digest: str
    prev_digest: str
    digest: str

    @staticmethod
    def compute(seq, action, actor, payload_digest, prev_digest) -> str:
        msg = "\x1f".join([str(seq), action, actor, payload_digest, prev_digest])
        return hashlib.sha256(msg.encode("utf-8")).hexdigest()

    def recompute(self) -> str:
        return self.compute(self.seq, self.action, self.actor, self.payload_digest, self.prev_digest)


class AuditLedger:
    def __init__(self):
        self.entries: List[AuditEntry] = []
        self.counter = 0  # appends ever made; survives truncation of ``entries``

    @property
    def head(self) -> str:
        return self.entries[-1].digest if self.entries else GENESIS_DIGEST

    def append(self, action: str, actor: str, payload: bytes = b"") -> AuditEntry:
        payload_digest = hashlib.sha256(payload).hexdigest()
        seq = self.counter
        digest = AuditEntry.compute(seq, action, actor, payload_digest, self.head)
        entry = AuditEntry(seq, action, actor, payload_digest, self.head, digest)
        self.entries.append(entry)
        self.counter += 1
        return entry

    def verify(self) -> bool:
        prev = GENESIS_DIGEST
        for i, e in enumerate(self.entries):
            if e.seq != i or e.prev_digest != prev or e.recompute() != e.digest:
                return False
            prev = e.digest
        return True

    @property
    def length_mismatch(self) -> bool:
        """True when entries were removed from the tail after being appended."""
        return self.counter != len(self.entries)

    def by_actor(self, actor: str) -> List[AuditEntry]:
        return [e for e in self.entries if e.actor == actor]

    def to_json(self) -> list:
        return [e.__dict__.copy() for e in self.entries]


# LSH index ----------------------------------------------------------------------

class BitSamplingLSH:
    """Hamming-space LSH: each band hashes a response to the bits at fixed positions."""

    def __init__(self, length: int, bands: int = 16, bits_per_band: int = 12, seed: int = 0):
        if bits_per_band > length:
            raise InvalidParams("bits_per_band exceeds response length")
        self.length = length
        self.bands = bands
        self.bits_per_band = bits_per_band
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.positions = [np.sort(rng.choice(length, bits_per_band, replace=False)) for _ in range(bands)]
        self.tables: List[Dict[bytes, List[str]]] = [{} for _ in range(bands)]

    def _keys(self, r: PufResponse):
        return [np.packbits(r.bits[p]).tobytes() for p in self.positions]

    def add(self, key: str, r: PufResponse):
        for table, k in zip(self.tables, self._keys(r)):
            table.setdefault(k, []).append(key)

    def candidates(self, r: PufResponse) -> List[str]:
        seen = {}
        for table, k in zip(self.tables, self._keys(r)):
            for key in table.get(k, ()):
                seen[key] = None
        return list(seen)


# store --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TemplateRecord:
    product_id: str
    registered_at: int
    raw: Optional[Feature] = None
    salt: Optional[bytes] = None
    digest: Optional[bytes] = None

    def __post_init__(self):
        if (self.raw is None) == (self.digest is None):
            raise InvalidParams("a record holds exactly one payload variant")

    @property
    def kind(self) -> str:
        return "digest" if self.digest is not None else "raw"


@dataclass(frozen=True)
class DecisionPolicy:
    metric: str = "pearson"  # "l2" | "hamming" | "pearson"
    threshold: float = 0.5
    leak_scores: bool = False
    lockout_budget: Optional[int] = None

    def __post_init__(self):
        if self.metric not in ("l2", "hamming", "pearson"):
            raise InvalidParams(f"unknown metric {self.metric!r}")
        if self.metric != "pearson" and self.threshold < 0:
            raise InvalidParams("distance thresholds must be non-negative")
        if self.metric == "pearson" and not -1 <= self.threshold <= 1:
            raise InvalidParams("correlation thresholds lie in [-1, 1]")

    @property
    def higher_is_better(self) -> bool:
        return self.metric == "pearson"

    def accepts(self, score: float) -> bool:
        return score >= self.threshold if self.higher_is_better else score <= self.threshold


@dataclass(frozen=True)
class DecisionResult:
    accepted: bool
    audit_seq: int
    score: Optional[float] = None
    matched_id: Optional[str] = None  # advisory; only for ID-less queries


def score_features(metric: str, query: Feature, template: Feature) -> float:
    q = feature_vector(query)
    t = feature_vector(template)
    if q.size != t.size:
        raise DimensionMismatch("query and template dimensions differ")
    if metric == "l2":
        return float(np.linalg.norm(q - t))
    if metric == "hamming":
        if not (isinstance(query, PufResponse) and isinstance(template, PufResponse)):
            raise DimensionMismatch("hamming scoring needs binary responses")
        return float(np.count_nonzero(query.bits != template.bits)) / query.length
    try:
        return pearson(q, t)
    except ZeroVariance:
        return 0.0


class TemplateStore:
    """The reference database D.

    Single writer, many readers: mutations (registrations, decisions, which
    consume lockout budget) are serialized by a lock, and each appends its
    audit entry before releasing it.
    """

    def __init__(self, mode: str = "plain", quantizer: Optional[QuantizerConfig] = None,
                 stabilizer: bool = False, lsh_bands: int = 16, lsh_bits: int = 12, lsh_seed: int = 0,
                 salt_source=None):
        if mode not in STORE_MODES:
            raise InvalidParams(f"unknown store mode {mode!r}")
        self.mode = mode
        self.quantizer = quantizer or QuantizerConfig()
        self.stabilizer = stabilizer
        self.lsh_params = (lsh_bands, lsh_bits, lsh_seed)
        self._salt_source = salt_source or (lambda: secrets.token_bytes(SALT_BYTES))
        self._records: Dict[str, TemplateRecord] = {}
        self._signature = None
        self._lsh: Optional[BitSamplingLSH] = None
        self._clock = 0
        self._queries: Dict[str, int] = {}
        self._lock = threading.RLock()
        self.audit = AuditLedger()

    # helpers ------------------------------------------------------------------

    def _binary(self, feature: Feature) -> PufResponse:
        if isinstance(feature, NormMap):
            feature = quantize(feature, self.quantizer)
        if not isinstance(feature, PufResponse):
            raise DimensionMismatch(f"{self.mode} mode stores binary responses")
        return feature

    def _protected(self, feature: Feature) -> PufResponse:
        r = self._binary(feature)
        return repetition_encode(r) if self.stabilizer else r

    def _check_signature(self, feature: Feature):
        sig = feature_signature(feature)
        if self._signature is None:
            self._signature = sig
        elif sig != self._signature:
            raise DimensionMismatch(f"feature {sig} does not match store layout {self._signature}")

    def __len__(self):
        return len(self._records)

    def ids(self) -> List[str]:
        return list(self._records)

    # mutations ------------------------------------------------------------------

    def register(self, product_id: Optional[str], feature: Feature, actor: str = "registrar") -> TemplateRecord:
        with self._lock:
            if product_id is None:
                if self.mode != "lsh":
                    raise InvalidParams("ID-less registration requires lsh mode")
                product_id = f"anon-{len(self._records):06d}"
            if product_id in self._records:
                raise DuplicateId(product_id)

            if self.mode == "plain":
                self._check_signature(feature)
                record = TemplateRecord(product_id, self._clock, raw=feature)
            elif self.mode == "hashed":
                protected = self._protected(feature)
                self._check_signature(protected)
                salt = self._salt_source()
                record = TemplateRecord(product_id, self._clock, salt=salt,
                                        digest=hash_template(protected, salt))
            else:
                r = self._binary(feature)
                self._check_signature(r)
                if self._lsh is None:
                    bands, bits, seed = self.lsh_params
                    self._lsh = BitSamplingLSH(r.length, bands, bits, seed)
                self._lsh.add(product_id, r)
                record = TemplateRecord(product_id, self._clock, raw=r)

            self._records[product_id] = record
            self._clock += 1
            payload = record.digest if record.digest is not None else canonical_bytes(record.raw)
            self.audit.append("register:" + product_id, actor, payload)
            return record

    def new_epoch(self):
        """Reset every requester's lockout budget."""
        with self._lock:
            self._queries.clear()
            self.audit.append("new_epoch", "system")

    # reads ----------------------------------------------------------------------

    def lookup_by_id(self, product_id: str) -> TemplateRecord:
        try:
            return self._records[product_id]
        except KeyError:
            raise UnknownId(product_id) from None

    def raw_template(self, product_id: str) -> Feature:
        record = self.lookup_by_id(product_id)
        if record.raw is None:
            raise NothingToLeak(f"store holds only a salted digest for {product_id!r}")
        return record.raw

    def search_similar(self, probe: Feature, max_candidates: int = 10) -> List[Tuple[TemplateRecord, float]]:
        if self.mode != "lsh":
            raise WrongMode("similarity search needs an lsh-mode store")
        probe = self._binary(probe)
        if self._lsh is None:
            return []
        scored = []
        for key in self._lsh.candidates(probe):
            rec = self._records[key]
            scored.append((np.count_nonzero(rec.raw.bits != probe.bits) / probe.length, key))
        scored.sort()
        return [(self._records[k], d) for d, k in scored[:max_candidates]]

    def exhaustive_search(self, probe: Feature, max_candidates: int = 10) -> List[Tuple[TemplateRecord, float]]:
        """Linear scan over every raw record; the reference for LSH recall."""
        probe = self._binary(probe)
        scored = sorted(
            (np.count_nonzero(rec.raw.bits != probe.bits) / probe.length, key)
            for key, rec in self._records.items() if rec.raw is not None
        )
        return [(self._records[k], d) for d, k in scored[:max_candidates]]

    # decisions ----------------------------------------------------------------

    def queries_used(self, requester: str) -> int:
        return self._queries.get(requester, 0)

    def _score_against(self, policy: DecisionPolicy, query: Feature, record: TemplateRecord):
        if record.digest is not None:
            match = hash_template(self._protected(query), record.salt) == record.digest
            return (1.0 if match else 0.0) if policy.higher_is_better else (0.0 if match else 1.0), match
        template = record.raw
        if isinstance(template, PufResponse) and isinstance(query, NormMap):
            query = quantize(query, self.quantizer)
        s = score_features(policy.metric, query, template)
        return s, policy.accepts(s)

    def decide(self, policy: DecisionPolicy, requester: str, query: Feature,
               claimed_id: Optional[str] = None) -> DecisionResult:
        with self._lock:
            used = self._queries.get(requester, 0)
            if policy.lockout_budget is not None and used >= policy.lockout_budget:
                raise LockedOut(f"{requester!r} exhausted {policy.lockout_budget} queries this epoch")
            self._queries[requester] = used + 1

            matched = None
            if claimed_id is not None:
                score, accepted = self._score_against(policy, query, self.lookup_by_id(claimed_id))
            elif self.mode == "lsh":
                hits = self.search_similar(query, max_candidates=1)
                if hits:
                    score, accepted = self._score_against(policy, query, hits[0][0])
                    matched = hits[0][0].product_id
                else:
                    score, accepted = (-1.0 if policy.higher_is_better else float("inf")), False
            elif self.mode == "plain":
                best = None
                for rec in self._records.values():
                    s, ok = self._score_against(policy, query, rec)
                    better = best is None or (s > best[0] if policy.higher_is_better else s < best[0])
                    if better:
                        best = (s, ok, rec.product_id)
                if best is None:
                    raise UnknownId("store is empty")
                score, accepted, matched = best
            else:
                raise UnknownId("hashed stores need a claimed product ID")

            entry = self.audit.append(
                f"decide:{claimed_id or '*'}:{'accept' if accepted else 'reject'}",
                requester, canonical_bytes(query))
            if not policy.leak_scores:
                return DecisionResult(bool(accepted), entry.seq)
            return DecisionResult(bool(accepted), entry.seq, float(score), matched)

    # persistence ----------------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = bytearray()
        bands, bits, seed = self.lsh_params
        q = json.dumps({"quantizer": self.quantizer.to_dict(), "signature": self._signature},
                       sort_keys=True).encode()
        out += _STORE_HEADER.pack(_STORE_MAGIC, _STORE_VERSION, STORE_MODES.index(self.mode),
                                  int(self.stabilizer), len(self._records), len(self.audit.entries),
                                  self.audit.counter, self._clock, bands, bits, seed)
        out += _pack_str(q.decode())
        for rec in self._records.values():
            out += _pack_str(rec.product_id)
            out += struct.pack("<Q", rec.registered_at)
            if rec.digest is not None:
                out += struct.pack("<B", _KIND_DIGEST) + rec.salt + rec.digest
            else:
                kind, blob = _encode_raw(rec.raw)
                out += struct.pack("<BI", kind, len(blob)) + blob
        for e in self.audit.entries:
            out += struct.pack("<Q", e.seq)
            out += _pack_str(e.action) + _pack_str(e.actor)
            out += bytes.fromhex(e.payload_digest) + bytes.fromhex(e.prev_digest) + bytes.fromhex(e.digest)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TemplateStore":
        (magic, version, mode, stab, n_rec, n_audit, counter, clock,
         bands, bits, seed) = _STORE_HEADER.unpack_from(data)
        if magic != _STORE_MAGIC or version != _STORE_VERSION:
            raise InvalidParams("not a template store container")
        pos = _STORE_HEADER.size
        qjson, pos = _unpack_str(data, pos)
        meta = json.loads(qjson)
        qd = meta["quantizer"]
        store = cls(STORE_MODES[mode], QuantizerConfig(qd["scheme"], tuple(qd["components"]),
                                                       qd["downsample_stride"]),
                    bool(stab), bands, bits, seed)
        for _ in range(n_rec):
            pid, pos = _unpack_str(data, pos)
            (registered_at,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            (kind,) = struct.unpack_from("<B", data, pos)
            pos += 1
            if kind == _KIND_DIGEST:
                salt = data[pos:pos + SALT_BYTES]
                digest = data[pos + SALT_BYTES:pos + SALT_BYTES + 32]
                pos += SALT_BYTES + 32
                rec = TemplateRecord(pid, registered_at, salt=salt, digest=digest)
            else:
                (size,) = struct.unpack_from("<I", data, pos)
                pos += 4
                raw = _decode_raw(kind, data[pos:pos + size])
                pos += size
                rec = TemplateRecord(pid, registered_at, raw=raw)
            store._records[pid] = rec
            if rec.raw is not None and store.mode == "lsh":
                if store._lsh is None:
                    store._lsh = BitSamplingLSH(rec.raw.length, bands, bits, seed)
                store._lsh.add(pid, rec.raw)
        for _ in range(n_audit):
            (seq,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            action, pos = _unpack_str(data, pos)
            actor, pos = _unpack_str(data, pos)
            pd, prev, dig = (data[pos + 32 * i:pos + 32 * (i + 1)].hex() for i in range(3))
            pos += 96
            store.audit.entries.append(AuditEntry(seq, action, actor, pd, prev, dig))
        if meta["signature"] is not None:
            store._signature = tuple(meta["signature"])
        store.audit.counter = counter
        store._clock = clock
        return store

    def export_json(self) -> str:
        records = []
        for rec in self._records.values():
            item = {"product_id": rec.product_id, "registered_at": rec.registered_at, "kind": rec.kind}
            if rec.digest is not None:
                item["salt"] = rec.salt.hex()
                item["digest"] = rec.digest.hex()
            else:
                item["payload_sha256"] = hashlib.sha256(canonical_bytes(rec.raw)).hexdigest()
            records.append(item)
        doc = {"mode": self.mode, "records": records, "audit": self.audit.to_json(),
               "audit_counter": self.audit.counter}
        return json.dumps(doc, sort_keys=True, indent=2)


def verify_audit(store: TemplateStore) -> bool:
    return store.audit.verify()


def unauthorized_entries(store: TemplateStore, authorized_actors: Sequence[str],
                         action_prefix: str = "register:") -> List[AuditEntry]:
    """Audit review: mutations performed by actors outside the authorized set."""
    allowed = set(authorized_actors)
    return [e for e in store.audit.entries if e.action.startswith(action_prefix) and e.actor not in allowed]


# binary container helpers -------------------------------------------------------

_STORE_MAGIC = b"TSTR"
_STORE_VERSION = 1
_STORE_HEADER = struct.Struct("<4sHBBIIQQHHQ")
_KIND_RESPONSE, _KIND_NORMMAP, _KIND_VECTOR, _KIND_DIGEST = range(4)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(data: bytes, pos: int):
    (n,) = struct.unpack_from("<H", data, pos)
    return data[pos + 2:pos + 2 + n].decode("utf-8"), pos + 2 + n


def _encode_raw(raw: Feature):
    if isinstance(raw, PufResponse):
        return _KIND_RESPONSE, raw.to_hex().encode("ascii")
    if isinstance(raw, NormMap):
        return _KIND_NORMMAP, raw.to_bytes()
    return _KIND_VECTOR, np.asarray(raw, dtype="<f8").ravel().tobytes()


def _decode_raw(kind: int, blob: bytes) -> Feature:
    if kind == _KIND_RESPONSE:
        return PufResponse.from_hex(blob.decode("ascii"))
    if kind == _KIND_NORMMAP:
        return NormMap.from_bytes(blob)
    if kind == _KIND_VECTOR:
        return np.frombuffer(blob, dtype="<f8").copy()
    raise InvalidParams(f"unknown record kind {kind}")


# end-to-end authentication endpoint ------------------------------------------------

class AuthSystem:
    """Capture-level endpoint: f, phi (and quantization) in front of a store.

    ``nonce_check`` rejects any capture set whose nonce was already seen
    (replay defense).  ``qc_flagging`` routes captures whose registration
    fails to manual inspection instead of surfacing a bare error.
    """

    def __init__(self, store: TemplateStore, policy: DecisionPolicy, pipeline=None,
                 use_norm_map: Optional[bool] = None, nonce_check: bool = False,
                 qc_flagging: bool = False):
        self.store = store
        self.policy = policy
        self.pipeline = pipeline or Pipeline(quantizer=store.quantizer)
        # raw norm-map templates are compared directly; everything else is binarized
        self.use_norm_map = (store.mode == "plain") if use_norm_map is None else use_norm_map
        self.nonce_check = nonce_check
        self.qc_flagging = qc_flagging
        self.seen_nonces = set()
        self.attempts = 0
        self.failures = 0
        self.manual_inspection: List[Tuple[Optional[str], str]] = []

    @property
    def availability(self) -> float:
        return 1.0 if self.attempts == 0 else 1.0 - self.failures / self.attempts

    def extract(self, captures) -> Feature:
        if self.use_norm_map:
            return self.pipeline.norm_map(captures)
        return self.pipeline.response(captures)

    def enroll(self, product_id: Optional[str], captures, actor: str = "registrar") -> TemplateRecord:
        return self.store.register(product_id, self.extract(captures), actor=actor)

    def authenticate(self, captures, claimed_id: Optional[str] = None,
                     requester: str = "client") -> DecisionResult:
        self.attempts += 1
        if self.nonce_check:
            if captures.nonce in self.seen_nonces:
                self.failures += 1
                raise StaleNonce(f"capture nonce {captures.nonce} was already presented")
            self.seen_nonces.add(captures.nonce)
        try:
            feature = self.extract(captures)
        except AlignmentFailed:
            self.failures += 1
            if self.qc_flagging:
                self.manual_inspection.append((claimed_id, "alignment_failed"))
            raise
        return self.store.decide(self.policy, requester, feature, claimed_id)

    def check(self, captures, claimed_id: Optional[str] = None, requester: str = "client") -> str:
        """Quality-control wrapper: 'authenticated', 'rejected' or 'manual_inspection'."""
        try:
            result = self.authenticate(captures, claimed_id, requester)
        except AlignmentFailed:
            if self.qc_flagging:
                return "manual_inspection"
            raise
        except StaleNonce:
            return "rejected"
        return "authenticated" if result.accepted else "rejected"
