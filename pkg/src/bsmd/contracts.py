"""Owner-defined smart contracts: accept, grant, revoke, evaluate.

A contract is the single gate in front of a node's data. It executes locally
at the owner node; the ledger only ever sees a digest commitment of it, never
the policy itself. Every mutation must carry a signature by the owner's
master key over the exact mutation payload, so no other party (and no replay
of an old approval) can change what is shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Union

from . import crypto
from .errors import BadSignature, RevokedPeer, UnknownPeer
from .identity import Did, NodeIdentity, NodeRole


class Verdict(Enum):
    ACCEPT = "accept"
    DENY = "deny"
    REVOKED = "revoked"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AccessDecision:
    """Outcome of a contract evaluation; granted is empty unless accepted."""

    verdict: Verdict
    granted: frozenset
    reason: str = ""

    def __post_init__(self):
        if self.verdict is Verdict.ACCEPT and not self.granted:
            raise ValueError("accepting decision must grant at least one category")
        if self.verdict is not Verdict.ACCEPT and self.granted:
            raise ValueError("non-accepting decision must grant nothing")

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPT


@dataclass(frozen=True)
class ConnectionRequest:
    requester: str
    requester_role: NodeRole
    requested_categories: frozenset
    service: Optional[str] = None
    tick: int = 0

    def __post_init__(self):
        if not self.requested_categories:
            raise ValueError("a connection request must name at least one category")


@dataclass(frozen=True)
class RevocationNotice:
    """Emitted by revoke(); the channel layer closes connections and purges."""

    owner: str
    peer: str
    tick: int


class SmartContract:
    """Policy object owned by one node; mutations require owner signatures."""

    def __init__(self, owner: str, owner_public: bytes, address: str):
        self.owner = owner
        self.owner_public = owner_public
        self.address = address
        self.policy: dict[str, set] = {}
        self.mandatory: dict[str, frozenset] = {}
        self.revoked: set[str] = set()
        self.pending: list[ConnectionRequest] = []
        # peer connection DID string -> peer node id, bound at handshake
        self.did_bindings: dict[str, str] = {}
        self.version = 0

    def bind_did(self, did_string: str, peer: str) -> None:
        self.did_bindings[did_string] = peer

    def peers(self) -> list[str]:
        known = set(self.policy) | set(self.did_bindings.values())
        known |= {req.requester for req in self.pending}
        return sorted(known - self.revoked)

    def revoke_all(self, owner_key: crypto.SigningKey) -> list[RevocationNotice]:
        notices = []
        for peer in self.peers():
            sig = sign_mutation(self, owner_key, "revoke", peer)
            notices.append(revoke(self, peer, sig))
        return notices


def issue_contract(node: NodeIdentity) -> SmartContract:
    """Create and attach the node's contract; address is fresh randomness."""
    address = "contract-" + crypto.random_bytes(node.rng, 16).hex()
    contract = SmartContract(node.node_id, node.master.public_bytes, address)
    node.contract = contract
    return contract


def mutation_payload(contract: SmartContract, op: str, *args) -> bytes:
    """Bytes the owner signs for one mutation.

    Binds the contract address and current version, so a signature neither
    transfers to another contract nor replays after later mutations.
    """
    return crypto.canonical_bytes([op, contract.address, contract.version, list(args)])


def sign_mutation(contract: SmartContract, owner_key: crypto.SigningKey,
                  op: str, *args) -> bytes:
    return owner_key.sign(mutation_payload(contract, op, *args))


def _check_sig(contract: SmartContract, sig: bytes, op: str, *args) -> None:
    payload = mutation_payload(contract, op, *args)
    if not crypto.verify(contract.owner_public, payload, sig):
        raise BadSignature(f"owner signature invalid for {op} on {contract.address}")


def accept_connection(contract: SmartContract, req: ConnectionRequest,
                      owner_sig: bytes,
                      grant_categories: Optional[Iterable[str]] = None) -> AccessDecision:
    """Owner-approved acceptance of a pending connection request.

    The owner selects the grant (defaults to exactly the requested set). If
    the request names a service, the grant must cover that service's
    mandatory categories or the decision is a Deny.
    """
    selected = frozenset(grant_categories if grant_categories is not None
                         else req.requested_categories)
    _check_sig(contract, owner_sig, "accept", req.requester,
               sorted(req.requested_categories), req.service or "", sorted(selected))
    contract.pending = [p for p in contract.pending if p != req]
    if req.requester in contract.revoked:
        return AccessDecision(Verdict.REVOKED, frozenset(), "requester was revoked")
    if req.service is not None:
        required = contract.mandatory.get(req.service, frozenset())
        if not required <= selected:
            missing = sorted(required - selected)
            return AccessDecision(Verdict.DENY, frozenset(),
                                  f"mandatory categories missing for "
                                  f"{req.service}: {missing}")
    decided = selected & req.requested_categories
    if not decided:
        return AccessDecision(Verdict.DENY, frozenset(), "owner granted nothing requested")
    contract.policy.setdefault(req.requester, set()).update(selected)
    contract.version += 1
    return AccessDecision(Verdict.ACCEPT, frozenset(decided))


def grant(contract: SmartContract, peer: str, categories: Iterable[str],
          owner_sig: bytes) -> None:
    """Extend a peer's grant; a no-op for the empty set."""
    categories = frozenset(categories)
    _check_sig(contract, owner_sig, "grant", peer, sorted(categories))
    if peer in contract.revoked:
        raise RevokedPeer(f"{peer} is revoked on {contract.address}")
    if not categories:
        return
    contract.policy.setdefault(peer, set()).update(categories)
    contract.version += 1


def revoke(contract: SmartContract, peer: str, owner_sig: bytes,
           tick: int = 0) -> RevocationNotice:
    """Put a peer on the deny list and clear its grant; idempotent."""
    _check_sig(contract, owner_sig, "revoke", peer)
    contract.revoked.add(peer)
    contract.policy.pop(peer, None)
    contract.pending = [p for p in contract.pending if p.requester != peer]
    contract.version += 1
    return RevocationNotice(contract.owner, peer, tick)


def set_mandatory(contract: SmartContract, service: str,
                  categories: Iterable[str], owner_sig: bytes) -> None:
    """Declare the minimum categories a service-scoped acceptance must cover."""
    categories = frozenset(categories)
    _check_sig(contract, owner_sig, "set_mandatory", service, sorted(categories))
    contract.mandatory[service] = categories
    contract.version += 1


def evaluate_request(contract: SmartContract, peer_did: Union[Did, str],
                     categories: Iterable[str]) -> AccessDecision:
    """Pure check: what of `categories` may the peer behind this DID receive."""
    did_string = peer_did.did_string if isinstance(peer_did, Did) else peer_did
    peer = contract.did_bindings.get(did_string)
    if peer is None:
        raise UnknownPeer(f"DID never connected here: {did_string}")
    if peer in contract.revoked:
        return AccessDecision(Verdict.REVOKED, frozenset(), "peer revoked")
    allowed = frozenset(categories) & frozenset(contract.policy.get(peer, ()))
    if not allowed:
        return AccessDecision(Verdict.DENY, frozenset(), "no overlap with grant")
    return AccessDecision(Verdict.ACCEPT, allowed)


def export_contract(contract: SmartContract,
                    owner_key: Optional[crypto.SigningKey] = None) -> dict:
    """Audit export; pseudonymous owner, signed when the owner key is given."""
    body = {
        "address": contract.address,
        "owner_pseudonym": crypto.digest(contract.owner_public)[:8].hex(),
        "policy": {peer: sorted(cats) for peer, cats in sorted(contract.policy.items())},
        "mandatory": {svc: sorted(cats) for svc, cats in sorted(contract.mandatory.items())},
        "revoked": sorted(contract.revoked),
        "version": contract.version,
    }
    if owner_key is not None:
        body["owner_signature"] = owner_key.sign(crypto.canonical_bytes(body)).hex()
    return body


def commitment_digest(contract: SmartContract) -> str:
    """Digest committed to the ledger in place of the policy itself."""
    return crypto.digest(crypto.canonical_bytes(export_contract(contract))).hex()


def policy_fingerprint(contract: SmartContract) -> str:
    """Digest of the mutable policy state; used to assert non-mutation."""
    doc = {
        "policy": {p: sorted(c) for p, c in sorted(contract.policy.items())},
        "mandatory": {s: sorted(c) for s, c in sorted(contract.mandatory.items())},
        "revoked": sorted(contract.revoked),
    }
    return crypto.digest(crypto.canonical_bytes(doc)).hex()
