"""Pairwise secure connections: handshake, sealed transfers, revocation.

The four-step flow: a receiving node asks the owner's contract for a
connection; on acceptance both sides mint fresh DIDs and derive a shared
session key from the DID agreement keys; data then moves peer-to-peer in
sealed envelopes; the receiver submits an identity record for each delivery.
Category labels ride in cleartext on the envelope (the ledger must expose
"type of information"); payloads never do.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence, Union

from . import contracts, crypto, ledger
from .contracts import ConnectionRequest, RevocationNotice, Verdict
from .errors import (
    AccessDenied,
    ChannelClosed,
    HandshakeFailure,
    NotGranted,
)
from .consensus import submit_record
from .identity import DataAsset, Did, NodeIdentity, mint_did

WIRE_VERSION = 1

# on_wire callback: (src_node_id, dst_node_id, kind, payload_bytes)
WireFn = Callable[[str, str, str, bytes], None]


class ConnState(Enum):
    REQUESTED = "requested"
    ESTABLISHED = "established"
    CLOSED = "closed"


class CloseReason(Enum):
    OWNER_REVOKED = "owner_revoked"
    PEER_LEFT = "peer_left"
    VOLUNTARY = "voluntary"


@dataclass
class Connection:
    """One endpoint of a pairwise channel; its twin lives at the peer."""

    node: NodeIdentity
    local_did: Did
    remote_did_string: str
    remote_sign_pub: bytes
    remote_node_id: str
    remote_role: str
    session_key: bytes
    is_owner_side: bool
    granted: frozenset
    opened_at: int
    state: ConnState = ConnState.ESTABLISHED
    peer: Optional["Connection"] = None
    revoked_at: Optional[int] = None


@dataclass(frozen=True)
class ReceivedAsset:
    """Plaintext as held by a receiver, tagged with its provenance DID."""

    asset_id: str
    category: str
    payload: bytes
    provenance_did: str
    provenance_role: str
    sender_did: str
    received_at: int


@dataclass(frozen=True)
class TransferEnvelope:
    version: int
    sender_did: str
    receiver_did: str
    categories: tuple
    tick: int
    ciphertext: bytes
    sender_sig: bytes

    def signed_payload(self) -> bytes:
        return crypto.canonical_bytes([
            crypto.digest(self.ciphertext).hex(),
            list(self.categories),
            self.tick,
        ])

    def to_bytes(self) -> bytes:
        """Length-prefixed wire layout, version byte first.

        version:u8 | sender_did:u16+utf8 | receiver_did:u16+utf8 |
        categories:u16 count, each u16+utf8 | tick:u64 |
        ciphertext:u32+bytes | signature:u16+bytes
        """
        out = bytearray([self.version])
        for text in (self.sender_did, self.receiver_did):
            raw = text.encode()
            out += struct.pack(">H", len(raw)) + raw
        out += struct.pack(">H", len(self.categories))
        for cat in self.categories:
            raw = cat.encode()
            out += struct.pack(">H", len(raw)) + raw
        out += struct.pack(">Q", self.tick)
        out += struct.pack(">I", len(self.ciphertext)) + self.ciphertext
        out += struct.pack(">H", len(self.sender_sig)) + self.sender_sig
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TransferEnvelope":
        view = memoryview(blob)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise ValueError("truncated envelope")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        version = take(1)[0]
        if version != WIRE_VERSION:
            raise ValueError(f"unsupported envelope version {version}")
        sender = take(struct.unpack(">H", take(2))[0]).decode()
        receiver = take(struct.unpack(">H", take(2))[0]).decode()
        count = struct.unpack(">H", take(2))[0]
        cats = tuple(take(struct.unpack(">H", take(2))[0]).decode()
                     for _ in range(count))
        tick = struct.unpack(">Q", take(8))[0]
        ciphertext = take(struct.unpack(">I", take(4))[0])
        sig = take(struct.unpack(">H", take(2))[0])
        if pos != len(view):
            raise ValueError("trailing bytes after envelope")
        return cls(version, sender, receiver, cats, tick, ciphertext, sig)


def _did_doc(did: Did, role: str) -> dict:
    return {
        "did": did.did_string,
        "sign_pub": did.signing.public_bytes.hex(),
        "agree_pub": did.agreement.public_bytes.hex(),
        "role": role,
    }


def open_connection(requester: NodeIdentity, owner: NodeIdentity,
                    req: ConnectionRequest,
                    grant_categories: Optional[Iterable[str]] = None,
                    tick: int = 0,
                    on_wire: Optional[WireFn] = None) -> tuple:
    """Run the handshake; returns (requester_conn, owner_conn).

    The owner's contract must accept the request first; only then are DIDs
    minted and exchanged. Raises AccessDenied when the contract says no and
    HandshakeFailure when key agreement breaks.
    """
    for cat in req.requested_categories:
        owner.registry.require(cat)
    contract = owner.contract
    if contract is None:
        raise AccessDenied("deny", f"{owner.node_id} has no contract")

    def wire(src: str, dst: str, kind: str, payload: bytes) -> None:
        if on_wire is not None:
            on_wire(src, dst, kind, payload)

    wire(requester.node_id, owner.node_id, "connection_request",
         crypto.canonical_bytes({
             "requester": req.requester,
             "requester_role": str(req.requester_role),
             "categories": sorted(req.requested_categories),
             "service": req.service or "",
             "tick": req.tick,
         }))
    contract.pending.append(req)
    owner_sig = contracts.sign_mutation(
        contract, owner.master, "accept", req.requester,
        sorted(req.requested_categories), req.service or "",
        sorted(grant_categories if grant_categories is not None
               else req.requested_categories))
    decision = contracts.accept_connection(contract, req, owner_sig, grant_categories)
    wire(owner.node_id, requester.node_id, "connection_decision",
         crypto.canonical_bytes({"verdict": str(decision.verdict),
                                 "granted": sorted(decision.granted)}))
    if not decision.accepted:
        raise AccessDenied(str(decision.verdict), decision.reason)

    owner_did = mint_did(owner, tick=tick)
    requester_did = mint_did(requester, tick=tick)
    wire(owner.node_id, requester.node_id, "did_exchange",
         crypto.canonical_bytes(_did_doc(owner_did, str(owner.role))))
    wire(requester.node_id, owner.node_id, "did_exchange",
         crypto.canonical_bytes(_did_doc(requester_did, str(requester.role))))
    owner_did.peer_did = requester_did.did_string
    requester_did.peer_did = owner_did.did_string

    owner_key = crypto.session_key(owner_did.agreement,
                                   requester_did.agreement.public_bytes,
                                   owner_did.did_string, requester_did.did_string)
    requester_key = crypto.session_key(requester_did.agreement,
                                       owner_did.agreement.public_bytes,
                                       requester_did.did_string, owner_did.did_string)
    confirm_o = crypto.digest(owner_key + b"confirm")
    confirm_r = crypto.digest(requester_key + b"confirm")
    wire(owner.node_id, requester.node_id, "key_confirm", confirm_o)
    wire(requester.node_id, owner.node_id, "key_confirm", confirm_r)
    if confirm_o != confirm_r:
        raise HandshakeFailure("session key confirmation mismatch")

    contract.bind_did(requester_did.did_string, requester.node_id)

    owner_conn = Connection(
        node=owner, local_did=owner_did,
        remote_did_string=requester_did.did_string,
        remote_sign_pub=requester_did.signing.public_bytes,
        remote_node_id=requester.node_id, remote_role=str(requester.role),
        session_key=owner_key, is_owner_side=True,
        granted=decision.granted, opened_at=tick)
    requester_conn = Connection(
        node=requester, local_did=requester_did,
        remote_did_string=owner_did.did_string,
        remote_sign_pub=owner_did.signing.public_bytes,
        remote_node_id=owner.node_id, remote_role=str(owner.role),
        session_key=requester_key, is_owner_side=False,
        granted=decision.granted, opened_at=tick)
    owner_conn.peer = requester_conn
    requester_conn.peer = owner_conn
    owner.connections[owner_did.did_string] = owner_conn
    requester.connections[requester_did.did_string] = requester_conn
    return requester_conn, owner_conn


def opened_record(owner_conn: Connection, tick: int) -> ledger.IdentityRecord:
    """ConnectionOpened entry, submitted by the receiving (requester) side."""
    requester_conn = owner_conn.peer
    return ledger.make_record(
        ledger.KIND_CONNECTION_OPENED,
        did_ref=owner_conn.local_did.did_string,
        counterparty_did=requester_conn.local_did.did_string,
        role_pair=(owner_conn.node.role.value, requester_conn.node.role.value),
        categories=sorted(owner_conn.granted),
        tick=tick,
        submitter=requester_conn.local_did,
    )


def _as_items(conn: Connection, assets: Sequence[Union[DataAsset, ReceivedAsset]]) -> list:
    """Normalize to (asset_id, category, payload, provenance_did, provenance_role)."""
    items = []
    sender = conn.node
    for asset in assets:
        if isinstance(asset, ReceivedAsset):
            items.append((asset.asset_id, asset.category, asset.payload,
                          asset.provenance_did, asset.provenance_role))
        else:
            payload = sender.vault.read(asset.asset_id)
            items.append((asset.asset_id, asset.category, payload,
                          conn.local_did.did_string, sender.role.value))
    provenances = {item[3] for item in items}
    if len(provenances) > 1:
        raise ValueError("one envelope carries data of one provenance DID")
    return items


def make_envelope(conn: Connection,
                  assets: Sequence[Union[DataAsset, ReceivedAsset]],
                  tick: int = 0) -> TransferEnvelope:
    """Seal assets for the peer; enforces the grant before anything is built.

    All-or-nothing: if any category falls outside the live grant, NotGranted
    is raised and no ciphertext exists to leak.
    """
    if conn.state is not ConnState.ESTABLISHED:
        raise ChannelClosed(f"connection is {conn.state.value}")
    if not conn.is_owner_side:
        raise ValueError("transfers flow from the data-owning side")
    if not assets:
        raise ValueError("nothing to transfer")
    categories = frozenset(a.category for a in assets)
    decision = contracts.evaluate_request(conn.node.contract,
                                          conn.remote_did_string, categories)
    if decision.verdict is not Verdict.ACCEPT or decision.granted != categories:
        raise NotGranted(f"grant does not cover {sorted(categories - decision.granted)}")
    items = _as_items(conn, assets)
    bundle = crypto.canonical_bytes([
        {"asset_id": aid, "category": cat, "payload": payload.hex(),
         "provenance_did": pdid, "provenance_role": prole}
        for aid, cat, payload, pdid, prole in items
    ])
    ciphertext = crypto.encrypt(conn.session_key, bundle, conn.node.rng)
    envelope = TransferEnvelope(
        version=WIRE_VERSION,
        sender_did=conn.local_did.did_string,
        receiver_did=conn.remote_did_string,
        categories=tuple(sorted(categories)),
        tick=tick,
        ciphertext=ciphertext,
        sender_sig=b"",
    )
    sig = conn.local_did.signing.sign(envelope.signed_payload())
    return replace(envelope, sender_sig=sig)


def deliver_envelope(receiver_conn: Connection, envelope: TransferEnvelope,
                     tick: int = 0) -> list:
    """Receiver side: verify, unseal, store; returns the received assets."""
    if receiver_conn.state is not ConnState.ESTABLISHED:
        raise ChannelClosed(f"connection is {receiver_conn.state.value}")
    if envelope.receiver_did != receiver_conn.local_did.did_string:
        raise ChannelClosed("envelope addressed to a different DID")
    if envelope.sender_did != receiver_conn.remote_did_string:
        raise ChannelClosed("envelope sender DID does not match this connection")
    if not crypto.verify(receiver_conn.remote_sign_pub,
                         envelope.signed_payload(), envelope.sender_sig):
        raise HandshakeFailure("envelope signature invalid")
    bundle = crypto.decrypt(receiver_conn.session_key, envelope.ciphertext)
    receiver = receiver_conn.node
    received = []
    for item in json.loads(bundle.decode()):
        received.append(ReceivedAsset(
            asset_id=item["asset_id"],
            category=item["category"],
            payload=bytes.fromhex(item["payload"]),
            provenance_did=item["provenance_did"],
            provenance_role=item["provenance_role"],
            sender_did=envelope.sender_did,
            received_at=tick,
        ))
    store = receiver.received.setdefault(receiver_conn.local_did.did_string, [])
    store.extend(received)
    return received


def transfer_record(receiver_conn: Connection, envelope: TransferEnvelope,
                    received: Sequence[ReceivedAsset],
                    tick: int) -> ledger.IdentityRecord:
    """DataTransferred entry, submitted by the receiver.

    did_ref is the provenance DID of the carried data: for first-hand
    transfers that is the sender's connection DID; for re-shared data it is
    the DID under which the original owner released it, which is what lets
    the owner spot the share in an audit.
    """
    provenance_did = received[0].provenance_did
    provenance_role = received[0].provenance_role
    return ledger.make_record(
        ledger.KIND_DATA_TRANSFERRED,
        did_ref=provenance_did,
        counterparty_did=receiver_conn.local_did.did_string,
        role_pair=(provenance_role, receiver_conn.node.role.value),
        categories=envelope.categories,
        tick=tick,
        submitter=receiver_conn.local_did,
    )


def transfer(conn: Connection,
             assets: Sequence[Union[DataAsset, ReceivedAsset]],
             tick: int = 0,
             validators: Optional[Sequence] = None,
             scanner=None,
             on_wire: Optional[WireFn] = None,
             submit: bool = True) -> TransferEnvelope:
    """End-to-end library-mode transfer: seal, ship, deliver, ledger.

    The simulator drives the same pieces (make_envelope / deliver_envelope /
    transfer_record) itself so it can put latency, drops, and taps between
    them.
    """
    envelope = make_envelope(conn, assets, tick)
    if on_wire is not None:
        on_wire(conn.node.node_id, conn.remote_node_id, "transfer",
                envelope.to_bytes())
    received = deliver_envelope(conn.peer, envelope, tick)
    conn.node.sent_log.add((received[0].provenance_did, envelope.receiver_did,
                            frozenset(envelope.categories), tick))
    if submit and validators is not None:
        rec = transfer_record(conn.peer, envelope, received, tick)
        submit_record(rec, validators, scanner)
    return envelope


def close_connection(conn: Connection, reason: CloseReason,
                     tick: int = 0) -> None:
    """Close both endpoints; idempotent. Owner revocation purges the receiver."""
    endpoints = [conn] + ([conn.peer] if conn.peer is not None else [])
    for end in endpoints:
        if end.state is ConnState.CLOSED:
            continue
        end.state = ConnState.CLOSED
        if reason is CloseReason.OWNER_REVOKED:
            end.revoked_at = tick
    if reason is CloseReason.OWNER_REVOKED:
        receiver = conn if not conn.is_owner_side else conn.peer
        if receiver is not None and receiver.node.honest:
            _purge_received(receiver)


def _purge_received(receiver_conn: Connection) -> None:
    # Rogue receivers ignoring the purge are modeled by the adversary layer,
    # which copies assets out before revocation lands.
    receiver_conn.node.received.pop(receiver_conn.local_did.did_string, None)


def revoked_record(owner_conn: Connection, tick: int) -> ledger.IdentityRecord:
    """ConnectionRevoked entry, submitted by the revoking owner."""
    return ledger.make_record(
        ledger.KIND_CONNECTION_REVOKED,
        did_ref=owner_conn.local_did.did_string,
        counterparty_did=owner_conn.remote_did_string,
        role_pair=(owner_conn.node.role.value, owner_conn.remote_role),
        categories=(),
        tick=tick,
        submitter=owner_conn.local_did,
    )


def revoke_peer(owner: NodeIdentity, peer_id: str, tick: int = 0,
                validators: Optional[Sequence] = None,
                scanner=None,
                on_wire: Optional[WireFn] = None) -> RevocationNotice:
    """Contract revocation plus the channel cascade: close, purge, ledger."""
    contract = owner.contract
    sig = contracts.sign_mutation(contract, owner.master, "revoke", peer_id)
    notice = contracts.revoke(contract, peer_id, sig, tick)
    for conn in list(owner.connections.values()):
        if conn.remote_node_id != peer_id or conn.state is ConnState.CLOSED:
            continue
        if on_wire is not None:
            on_wire(owner.node_id, peer_id, "revocation_notice",
                    crypto.canonical_bytes({"owner_did": conn.local_did.did_string,
                                            "tick": tick}))
        close_connection(conn, CloseReason.OWNER_REVOKED, tick)
        if validators is not None and conn.is_owner_side:
            submit_record(revoked_record(conn, tick), validators, scanner)
    return notice
