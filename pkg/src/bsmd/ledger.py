"""The public hash-linked ledger of identity records.

Records are deliberately opaque: DID strings, a role pair, category labels,
a kind, a tick. No node id, no master key, no payload ever goes on chain;
a scanner enforces that at submission and validators enforce it again before
voting. Blocks link by digest and carry a quorum certificate from the
validator set.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from . import crypto
from .errors import InvalidSignature, PrivacyViolation
from .identity import Did, did_string_for

GENESIS_PREV = "0" * 64

KIND_CONNECTION_OPENED = "connection_opened"
KIND_DATA_TRANSFERRED = "data_transferred"
KIND_CONNECTION_REVOKED = "connection_revoked"
KIND_CONTRACT_COMMITMENT = "contract_commitment"

RECORD_KINDS = (
    KIND_CONNECTION_OPENED,
    KIND_DATA_TRANSFERRED,
    KIND_CONNECTION_REVOKED,
    KIND_CONTRACT_COMMITMENT,
)

_ROLES = ("individual", "company", "government", "university")
_DID_RE = re.compile(r"^did:bsmd:[0-9a-f]{32}$")
_CATEGORY_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_HEX_RE = re.compile(r"^[0-9a-f]*$")


@dataclass(frozen=True)
class IdentityRecord:
    """One opaque ledger entry. did_ref is the data owner's connection DID."""

    did_ref: str
    counterparty_did: str
    role_pair: tuple
    categories: tuple
    kind: str
    tick: int
    submitter_pub: str
    submitter_sig: str
    record_id: str
    commitment: str = ""

    def content_dict(self) -> dict:
        """Fields covered by the record id (everything but sig and id)."""
        return {
            "did_ref": self.did_ref,
            "counterparty_did": self.counterparty_did,
            "role_pair": list(self.role_pair),
            "categories": list(self.categories),
            "kind": self.kind,
            "tick": self.tick,
            "commitment": self.commitment,
            "submitter_pub": self.submitter_pub,
        }

    def to_dict(self) -> dict:
        doc = self.content_dict()
        doc["record_id"] = self.record_id
        doc["submitter_sig"] = self.submitter_sig
        return doc


def record_content_id(content: dict) -> str:
    return crypto.digest(crypto.canonical_bytes(content)).hex()


def make_record(kind: str, did_ref: str, counterparty_did: str,
                role_pair: tuple, categories: Iterable[str], tick: int,
                submitter: Did, commitment: str = "") -> IdentityRecord:
    """Build and sign a record with one of the two connection DIDs."""
    if submitter.did_string not in (did_ref, counterparty_did):
        raise ValueError("submitter DID must be one of the record's two DIDs")
    content = {
        "did_ref": did_ref,
        "counterparty_did": counterparty_did,
        "role_pair": [str(role_pair[0]), str(role_pair[1])],
        "categories": sorted(categories),
        "kind": kind,
        "tick": tick,
        "commitment": commitment,
        "submitter_pub": submitter.signing.public_bytes.hex(),
    }
    record_id = record_content_id(content)
    sig = submitter.signing.sign(record_id.encode())
    return IdentityRecord(
        did_ref=did_ref,
        counterparty_did=counterparty_did,
        role_pair=(str(role_pair[0]), str(role_pair[1])),
        categories=tuple(sorted(categories)),
        kind=kind,
        tick=tick,
        submitter_pub=content["submitter_pub"],
        submitter_sig=sig.hex(),
        record_id=record_id,
        commitment=commitment,
    )


def record_from_dict(doc: dict) -> IdentityRecord:
    expected = {"did_ref", "counterparty_did", "role_pair", "categories", "kind",
                "tick", "commitment", "submitter_pub", "submitter_sig", "record_id"}
    if set(doc) != expected:
        raise ValueError(f"record fields {sorted(set(doc) ^ expected)} unexpected or missing")
    return IdentityRecord(
        did_ref=doc["did_ref"],
        counterparty_did=doc["counterparty_did"],
        role_pair=tuple(doc["role_pair"]),
        categories=tuple(doc["categories"]),
        kind=doc["kind"],
        tick=doc["tick"],
        submitter_pub=doc["submitter_pub"],
        submitter_sig=doc["submitter_sig"],
        record_id=doc["record_id"],
        commitment=doc["commitment"],
    )


def validate_record(rec: IdentityRecord) -> None:
    """Structural and signature checks; raises on the first defect.

    Structure first: every field must look like what it claims to be, so a
    record cannot smuggle identifying bytes through a free-form field.
    """
    for label, did in (("did_ref", rec.did_ref), ("counterparty_did", rec.counterparty_did)):
        if not _DID_RE.match(did):
            raise PrivacyViolation(f"{label} is not a connection DID: {did!r}")
    if rec.kind not in RECORD_KINDS:
        raise PrivacyViolation(f"unknown record kind: {rec.kind!r}")
    if len(rec.role_pair) != 2 or any(r not in _ROLES for r in rec.role_pair):
        raise PrivacyViolation(f"malformed role pair: {rec.role_pair!r}")
    for cat in rec.categories:
        if not _CATEGORY_RE.match(cat):
            raise PrivacyViolation(f"malformed category label: {cat!r}")
    if tuple(sorted(rec.categories)) != rec.categories:
        raise PrivacyViolation("categories must be sorted and duplicate-free")
    if not isinstance(rec.tick, int) or rec.tick < 0:
        raise PrivacyViolation(f"malformed tick: {rec.tick!r}")
    if not _HEX_RE.match(rec.commitment) or len(rec.commitment) not in (0, 64):
        raise PrivacyViolation("commitment must be empty or a 64-char digest")
    if rec.record_id != record_content_id(rec.content_dict()):
        raise InvalidSignature(f"record id does not recompute: {rec.record_id}")
    try:
        pub = bytes.fromhex(rec.submitter_pub)
        sig = bytes.fromhex(rec.submitter_sig)
    except ValueError:
        raise InvalidSignature("submitter key or signature is not hex") from None
    if did_string_for(pub) not in (rec.did_ref, rec.counterparty_did):
        raise InvalidSignature("submitter key does not belong to either DID")
    if not crypto.verify(pub, rec.record_id.encode(), sig):
        raise InvalidSignature(f"record signature invalid: {rec.record_id}")


class PrivacyScanner:
    """Byte-scan deny list: node ids, master keys, sentinel payloads.

    The structural checks in validate_record() make leaks impossible through
    schema fields; this scanner is the second, dumber line of defense that
    looks at the raw serialized bytes.
    """

    def __init__(self):
        self._patterns: list[tuple[str, bytes]] = []

    def forbid(self, label: str, pattern: bytes) -> None:
        if pattern:
            self._patterns.append((label, pattern))
            self._patterns.append((label + ":hex", pattern.hex().encode()))

    def scan_bytes(self, blob: bytes, context: str = "") -> None:
        for label, pattern in self._patterns:
            if pattern in blob:
                where = f" in {context}" if context else ""
                raise PrivacyViolation(f"forbidden bytes ({label}) found{where}")

    def scan_record(self, rec: IdentityRecord) -> None:
        self.scan_bytes(crypto.canonical_bytes(rec.to_dict()), f"record {rec.record_id}")


@dataclass
class Block:
    height: int
    prev_hash: str
    records: list
    proposer: str
    block_hash: str
    quorum_sigs: list = field(default_factory=list)  # [(validator_id, sig_hex)]


def block_content_hash(height: int, prev_hash: str, proposer: str,
                       records: Sequence[IdentityRecord]) -> str:
    content = {
        "height": height,
        "prev_hash": prev_hash,
        "proposer": proposer,
        "records": [r.to_dict() for r in records],
    }
    return crypto.digest(crypto.canonical_bytes(content)).hex()


def build_block(height: int, prev_hash: str, proposer: str,
                records: Sequence[IdentityRecord]) -> Block:
    ordered = sorted(records, key=lambda r: (r.tick, r.record_id))
    return Block(
        height=height,
        prev_hash=prev_hash,
        records=list(ordered),
        proposer=proposer,
        block_hash=block_content_hash(height, prev_hash, proposer, ordered),
    )


def commit_message(height: int, block_hash: str) -> bytes:
    """Preimage of a quorum signature; view-independent so chains verify."""
    return crypto.canonical_bytes(["block-commit", height, block_hash])


@dataclass(frozen=True)
class ValidatorInfo:
    validator_id: str
    public: str  # consensus signing key, hex


class ValidatorSet:
    """Static, ordered membership; tolerates f Byzantine of n >= 3f+1."""

    def __init__(self, members: Sequence[ValidatorInfo], f: Optional[int] = None):
        self.members = list(members)
        self.f = (len(self.members) - 1) // 3 if f is None else f
        if len(self.members) < 3 * self.f + 1:
            raise ValueError(f"{len(self.members)} validators cannot tolerate f={self.f}")
        self._by_id = {m.validator_id: m for m in self.members}
        if len(self._by_id) != len(self.members):
            raise ValueError("duplicate validator ids")

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    def public_of(self, validator_id: str) -> Optional[bytes]:
        info = self._by_id.get(validator_id)
        return bytes.fromhex(info.public) if info else None

    def to_dict(self) -> dict:
        return {
            "f": self.f,
            "members": [
                {"validator_id": m.validator_id, "public": m.public}
                for m in self.members
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ValidatorSet":
        members = [ValidatorInfo(m["validator_id"], m["public"]) for m in doc["members"]]
        return cls(members, f=doc["f"])


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    bad_height: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def verify_chain(chain: Sequence[Block], validators: ValidatorSet) -> ChainVerdict:
    """True iff every block recomputes, links, and carries a valid quorum.

    Strict on signatures: every signature present must verify, not just a
    quorum's worth, so a single flipped byte anywhere in the chain shows up.
    """
    seen_records: set[str] = set()
    prev = GENESIS_PREV
    for index, block in enumerate(chain):
        def bad(reason: str) -> ChainVerdict:
            return ChainVerdict(False, block.height, reason)

        if block.height != index:
            return bad(f"height {block.height} at position {index}")
        if block.prev_hash != prev:
            return bad("previous-hash link broken")
        for rec in block.records:
            try:
                validate_record(rec)
            except (InvalidSignature, PrivacyViolation) as exc:
                return bad(f"record invalid: {exc}")
            if rec.record_id in seen_records:
                return bad(f"duplicate record {rec.record_id}")
            seen_records.add(rec.record_id)
        keys = [(r.tick, r.record_id) for r in block.records]
        if keys != sorted(keys):
            return bad("records out of canonical order")
        recomputed = block_content_hash(block.height, block.prev_hash,
                                        block.proposer, block.records)
        if recomputed != block.block_hash:
            return bad("block hash does not recompute")
        sig_ids = [vid for vid, _ in block.quorum_sigs]
        if len(set(sig_ids)) != len(sig_ids):
            return bad("duplicate validator in quorum")
        if len(sig_ids) < validators.quorum:
            return bad(f"quorum too small: {len(sig_ids)} < {validators.quorum}")
        message = commit_message(block.height, block.block_hash)
        for vid, sig_hex in block.quorum_sigs:
            public = validators.public_of(vid)
            if public is None:
                return bad(f"signer {vid} not in validator set")
            try:
                sig = bytes.fromhex(sig_hex)
            except ValueError:
                return bad(f"signature of {vid} is not hex")
            if not crypto.verify(public, message, sig):
                return bad(f"signature of {vid} invalid")
        prev = block.block_hash
    return ChainVerdict(True)


def iter_records(chain: Sequence[Block]):
    for block in chain:
        for rec in block.records:
            yield rec


def audit_query(chain: Sequence[Block], my_dids: Iterable[str]) -> list:
    """Records involving any of my DIDs, in chain order. The ledger is public."""
    mine = set(my_dids)
    return [rec for rec in iter_records(chain)
            if rec.did_ref in mine or rec.counterparty_did in mine]


def observer_view(chain: Sequence[Block]) -> list:
    """What a non-participant learns: role pairs, category labels, ticks."""
    return [
        {"roles": list(rec.role_pair), "categories": list(rec.categories),
         "tick": rec.tick}
        for rec in iter_records(chain)
    ]


def detect_unexpected_shares(chain: Sequence[Block], my_dids: Iterable[str],
                             sent_log: set) -> list:
    """Transfer records that reference my DIDs but that I never performed.

    sent_log holds (did_ref, counterparty_did, frozenset(categories), tick)
    tuples of the transfers this node actually made.
    """
    mine = set(my_dids)
    flagged = []
    for rec in iter_records(chain):
        if rec.kind != KIND_DATA_TRANSFERRED or rec.did_ref not in mine:
            continue
        key = (rec.did_ref, rec.counterparty_did, frozenset(rec.categories), rec.tick)
        if key not in sent_log:
            flagged.append(rec)
    return flagged


def export_chain(chain: Sequence[Block]) -> str:
    """JSON-lines export: one header line per block, one line per record."""
    lines = []
    for block in chain:
        lines.append(json.dumps({
            "type": "block",
            "height": block.height,
            "prev_hash": block.prev_hash,
            "proposer": block.proposer,
            "block_hash": block.block_hash,
            "quorum_sigs": [[vid, sig] for vid, sig in block.quorum_sigs],
        }, sort_keys=True, separators=(",", ":")))
        for rec in block.records:
            doc = rec.to_dict()
            doc["type"] = "record"
            doc["height"] = block.height
            lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def load_chain(text: str) -> list:
    """Parse a JSON-lines export; ValueError names the offending line."""
    chain: list[Block] = []
    current: Optional[Block] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: not valid JSON ({exc.msg})") from None
        if not isinstance(doc, dict) or "type" not in doc:
            raise ValueError(f"line {lineno}: expected an object with a 'type' field")
        if doc["type"] == "block":
            try:
                current = Block(
                    height=doc["height"],
                    prev_hash=doc["prev_hash"],
                    records=[],
                    proposer=doc["proposer"],
                    block_hash=doc["block_hash"],
                    quorum_sigs=[(vid, sig) for vid, sig in doc["quorum_sigs"]],
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed block header ({exc})") from None
            chain.append(current)
        elif doc["type"] == "record":
            if current is None:
                raise ValueError(f"line {lineno}: record before any block header")
            height = doc.pop("height", None)
            if height != current.height:
                raise ValueError(f"line {lineno}: record height {height} does not "
                                 f"match block {current.height}")
            doc.pop("type")
            try:
                current.records.append(record_from_dict(doc))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed record ({exc})") from None
        else:
            raise ValueError(f"line {lineno}: unknown line type {doc['type']!r}")
    return chain
