"""Node identities, pairwise DIDs, and the owner-encrypted data vault.

A node keeps everything personal off-ledger: raw data lives in its vault,
encrypted under a per-node key, and the node's master keypair signs contract
mutations but never appears in any ledger artifact. The only identity other
parties ever see on-ledger is a per-connection DID derived from a fresh
keypair.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Optional

from . import crypto
from .errors import UnknownCategory

if TYPE_CHECKING:
    from .channel import Connection, ReceivedAsset
    from .contracts import RevocationNotice, SmartContract

DID_PREFIX = "did:bsmd:"
DID_DIGEST_BYTES = 16

CORE_CATEGORIES = (
    "gps_log",
    "speed",
    "direction",
    "mac_address",
    "gender",
    "origin",
    "destination",
    "inferred_mode",
)

_CATEGORY_RE = re.compile(r"^[a-z][a-z0-9_]*$")
_NODE_ID_RE = re.compile(r"^[a-z][a-z0-9_-]*$")


class NodeRole(Enum):
    INDIVIDUAL = "individual"
    COMPANY = "company"
    GOVERNMENT = "government"
    UNIVERSITY = "university"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "NodeRole":
        try:
            return cls(text.lower())
        except ValueError:
            raise ValueError(f"unknown node role: {text!r}") from None


class CategoryRegistry:
    """Network-wide registry of data category names."""

    def __init__(self, names=CORE_CATEGORIES):
        self._names: set[str] = set()
        for name in names:
            self.register(name)

    def register(self, name: str) -> None:
        if not _CATEGORY_RE.match(name or ""):
            raise ValueError(f"category name must be lowercase snake case: {name!r}")
        self._names.add(name)

    def __contains__(self, name: str) -> bool:
        return name in self._names

    def require(self, name: str) -> str:
        if name not in self._names:
            raise UnknownCategory(f"category not registered: {name!r}")
        return name

    def names(self) -> list[str]:
        return sorted(self._names)


@dataclass
class DataAsset:
    """One vault entry; the payload is stored encrypted at rest."""

    asset_id: str
    owner: str
    category: str
    ciphertext: bytes
    created_at: int


class Vault:
    """Per-node encrypted store; only the owner holds the vault key."""

    def __init__(self, key: bytes):
        self._key = key
        self._assets: dict[str, DataAsset] = {}

    def __len__(self) -> int:
        return len(self._assets)

    def store(self, owner: str, category: str, payload: bytes, tick: int,
              rng: random.Random) -> DataAsset:
        ciphertext = crypto.encrypt(self._key, payload, rng)
        asset_id = "asset-" + crypto.digest(ciphertext).hex()[:16]
        asset = DataAsset(asset_id, owner, category, ciphertext, tick)
        self._assets[asset_id] = asset
        return asset

    def get(self, asset_id: str) -> DataAsset:
        return self._assets[asset_id]

    def read(self, asset_id: str) -> bytes:
        """Decrypt one asset; works only with this vault's key."""
        return crypto.decrypt(self._key, self._assets[asset_id].ciphertext)

    def read_with(self, key: bytes, asset_id: str) -> bytes:
        """Decrypt with an explicit key (used by the leak adversary)."""
        return crypto.decrypt(key, self._assets[asset_id].ciphertext)

    def assets(self) -> list[DataAsset]:
        return sorted(self._assets.values(), key=lambda a: a.asset_id)

    def erase(self) -> None:
        self._assets.clear()

    @property
    def key(self) -> bytes:
        return self._key


@dataclass
class Did:
    """Per-connection identifier: a fresh keypair, nothing tied to the node.

    The signing and agreement halves derive from one fresh 32-byte seed, so a
    single DID keypair serves both the record signatures and the session-key
    agreement.
    """

    did_string: str
    signing: crypto.SigningKey
    agreement: crypto.AgreementKey
    created_at: int
    peer_did: Optional[str] = None
    active: bool = True


def did_string_for(signing_public: bytes) -> str:
    return DID_PREFIX + crypto.digest(signing_public)[:DID_DIGEST_BYTES].hex()


class NodeIdentity:
    """A network participant: role, master keys, vault, DIDs, connections."""

    def __init__(self, node_id: str, role: NodeRole, is_validator: bool,
                 rng: random.Random, registry: Optional[CategoryRegistry] = None):
        if not _NODE_ID_RE.match(node_id):
            raise ValueError(f"node id must be lowercase [a-z0-9_-]: {node_id!r}")
        self.node_id = node_id
        self.role = role
        self.is_validator = is_validator
        self.rng = rng
        self.registry = registry if registry is not None else CategoryRegistry()
        self.master = crypto.SigningKey.generate(rng)
        self.vault = Vault(crypto.random_bytes(rng, crypto.KEY_BYTES))
        self.dids: list[Did] = []
        self.active = True
        # Dishonest nodes skip protocol courtesies such as the revocation
        # purge; the adversary layer flips this.
        self.honest = True
        self.contract: Optional["SmartContract"] = None
        # Channel-layer state, keyed by this node's connection DID string.
        self.connections: dict[str, "Connection"] = {}
        self.received: dict[str, list["ReceivedAsset"]] = {}
        # (did_ref, counterparty_did, categories, tick) of transfers this node
        # made, for flagging on-ledger shares it never performed.
        self.sent_log: set[tuple[str, str, frozenset, int]] = set()

    def __repr__(self) -> str:
        return f"NodeIdentity({self.node_id!r}, {self.role.value}, dids={len(self.dids)})"

    def received_assets(self) -> list["ReceivedAsset"]:
        out = []
        for did in sorted(self.received):
            out.extend(self.received[did])
        return out


def create_node(role: NodeRole, is_validator: bool = False,
                rng_seed: Optional[int] = None, node_id: Optional[str] = None,
                registry: Optional[CategoryRegistry] = None) -> NodeIdentity:
    """Instantiate a participant with fresh master keys and an empty vault.

    Deterministic: the same (role, seed) yields byte-identical key material
    and node id.
    """
    rng = random.Random(rng_seed)
    if node_id is None:
        node_id = "node-" + crypto.random_bytes(rng, 8).hex()
    return NodeIdentity(node_id, role, is_validator, rng, registry)


def mint_did(node: NodeIdentity, rng: Optional[random.Random] = None,
             tick: int = 0) -> Did:
    """Mint a fresh pairwise DID for one connection.

    The identifier is the digest of a brand-new public key, so it depends
    only on fresh randomness, never on the node id or master key.
    """
    rng = rng if rng is not None else node.rng
    seed = crypto.random_bytes(rng, crypto.KEY_BYTES)
    signing = crypto.SigningKey.from_seed(seed)
    agreement = crypto.AgreementKey.from_seed(
        crypto.derive_key(seed, salt=b"", info=b"did-agreement-v1"))
    did = Did(did_string_for(signing.public_bytes), signing, agreement, tick)
    node.dids.append(did)
    return did


def store_asset(node: NodeIdentity, category: str, payload: bytes,
                tick: int = 0) -> str:
    """Encrypt a payload into the node's vault; returns the new asset id."""
    node.registry.require(category)
    asset = node.vault.store(node.node_id, category, payload, tick, node.rng)
    return asset.asset_id


def leave_network(node: NodeIdentity) -> list["RevocationNotice"]:
    """Erase the vault, revoke every peer, deactivate all DIDs.

    Ledger records that mention the node's DIDs remain: they carry no
    personal data, so immutability and deletion coexist. Returns the
    revocation notices for the channel layer to apply.
    """
    node.vault.erase()
    notices = []
    if node.contract is not None:
        notices = node.contract.revoke_all(node.master)
    for did in node.dids:
        did.active = False
    node.active = False
    return notices


def export_keystore(node: NodeIdentity, include_private: bool = False) -> dict:
    """Versioned keystore/vault container.

    The public form never includes private halves; the vault payloads stay
    encrypted either way.
    """
    doc = {
        "version": 1,
        "node_id": node.node_id,
        "role": node.role.value,
        "master_public": node.master.public_bytes.hex(),
        "encrypted_vault": [
            {
                "asset_id": a.asset_id,
                "category": a.category,
                "ciphertext": a.ciphertext.hex(),
                "created_at": a.created_at,
            }
            for a in node.vault.assets()
        ],
    }
    if include_private:
        doc["master_private"] = node.master.private_bytes().hex()
        doc["vault_key"] = node.vault.key.hex()
    return doc
