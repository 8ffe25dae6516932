"""Three-phase BFT consensus over the identity-record ledger.

Simplified PBFT with a static validator set: a round-robin leader
pre-prepares a block, validators exchange prepare and commit votes, and a
block commits once 2f+1 matching commit signatures exist. Those commit
signatures double as the block's quorum certificate. A view change rotates
the leader when a view produces no commit; the whole round fails with
NoQuorum once every view in the budget is exhausted.

The driver below is the "network": it delivers each phase's messages in an
order drawn from the caller's seeded RNG, so tests can permute delivery and
inject Byzantine behavior while runs stay reproducible.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from . import crypto
from .errors import InvalidSignature, NoQuorum, PrivacyViolation
from .ledger import (
    GENESIS_PREV,
    Block,
    IdentityRecord,
    PrivacyScanner,
    ValidatorInfo,
    ValidatorSet,
    block_content_hash,
    build_block,
    commit_message,
    validate_record,
)


class Behavior(Enum):
    HONEST = "honest"
    EQUIVOCATE = "equivocate"  # conflicting proposals/votes to different peers
    CRASHED = "crashed"        # sends and receives nothing


class ValidatorProcess:
    """One validator's replicated state: key, chain copy, mempool."""

    def __init__(self, validator_id: str, key: crypto.SigningKey,
                 behavior: Behavior = Behavior.HONEST):
        self.validator_id = validator_id
        self.key = key
        self.behavior = behavior
        self.chain: list[Block] = []
        self.mempool: dict[str, IdentityRecord] = {}

    @property
    def honest(self) -> bool:
        return self.behavior is Behavior.HONEST

    @property
    def reachable(self) -> bool:
        return self.behavior is not Behavior.CRASHED

    def info(self) -> ValidatorInfo:
        return ValidatorInfo(self.validator_id, self.key.public_bytes.hex())

    def head_hash(self) -> str:
        return self.chain[-1].block_hash if self.chain else GENESIS_PREV

    def sign_commit(self, height: int, block_hash: str) -> str:
        return self.key.sign(commit_message(height, block_hash)).hex()


def make_validators(count: int, rng: random.Random,
                    prefix: str = "val") -> list:
    """Fresh validator processes with deterministic keys and pseudonymous ids."""
    out = []
    for _ in range(count):
        key = crypto.SigningKey.generate(rng)
        vid = f"{prefix}-{crypto.digest(key.public_bytes)[:4].hex()}"
        out.append(ValidatorProcess(vid, key))
    return out


def validator_set_of(validators: Sequence[ValidatorProcess]) -> ValidatorSet:
    return ValidatorSet([v.info() for v in validators])


def submit_record(rec: IdentityRecord, validators: Sequence[ValidatorProcess],
                  scanner: Optional[PrivacyScanner] = None) -> None:
    """Validate, privacy-scan, and place a record in every honest mempool.

    Raises InvalidSignature or PrivacyViolation before anything is enqueued,
    so a bad record never reaches consensus at all.
    """
    validate_record(rec)
    if scanner is not None:
        scanner.scan_record(rec)
    for v in validators:
        if v.reachable:
            v.mempool[rec.record_id] = rec


@dataclass
class _PrePrepare:
    view: int
    block: Block
    leader_id: str
    sig: str  # leader signature over (height, view, block_hash)


def _preprepare_payload(height: int, view: int, block_hash: str) -> bytes:
    return crypto.canonical_bytes(["pre-prepare", height, view, block_hash])


def _prepare_payload(height: int, view: int, block_hash: str) -> bytes:
    return crypto.canonical_bytes(["prepare", height, view, block_hash])


def _valid_proposal(block: Block, process: ValidatorProcess,
                    scanner: Optional[PrivacyScanner]) -> bool:
    """Would an honest validator vote for this block?"""
    if block.height != len(process.chain) or block.prev_hash != process.head_hash():
        return False
    if not block.records:
        return False
    keys = [(r.tick, r.record_id) for r in block.records]
    if keys != sorted(keys) or len({r.record_id for r in block.records}) != len(keys):
        return False
    on_chain = {r.record_id for b in process.chain for r in b.records}
    for rec in block.records:
        if rec.record_id in on_chain:
            return False
        try:
            validate_record(rec)
            if scanner is not None:
                scanner.scan_record(rec)
        except (InvalidSignature, PrivacyViolation):
            return False
    return block.block_hash == block_content_hash(
        block.height, block.prev_hash, block.proposer, block.records)


def run_consensus(validators: Sequence[ValidatorProcess],
                  rng: Optional[random.Random] = None,
                  scanner: Optional[PrivacyScanner] = None,
                  max_views: Optional[int] = None) -> Optional[Block]:
    """Drive one height to commitment; returns the block, or None when every
    reachable leader had an empty mempool. Raises NoQuorum after the view
    budget runs out without a commit.

    All honest validators end the call with identical chains: a committed
    block is announced with its quorum certificate and adopted by every
    honest process before the call returns.
    """
    rng = rng if rng is not None else random.Random(0)
    vset = validator_set_of(validators)
    n = len(validators)
    honest = [v for v in validators if v.honest]
    if not honest:
        raise ValueError("no honest validators")
    height = len(honest[0].chain)
    if any(len(v.chain) != height for v in honest):
        raise RuntimeError("honest validators out of sync before round start")

    budget = max_views if max_views is not None else n
    proposed_any = False
    for view in range(budget):
        leader = validators[(height + view) % n]
        committed = _run_view(validators, vset, leader, height, view, rng, scanner)
        if committed is not None:
            _adopt(validators, committed)
            return committed
        if leader.reachable and leader.mempool:
            proposed_any = True
    if not proposed_any:
        return None
    raise NoQuorum(f"no block committed at height {height} after {budget} views")


def _run_view(validators, vset, leader, height, view, rng, scanner):
    """One view: pre-prepare, prepare, commit. Returns a certified block."""
    quorum = vset.quorum

    # --- pre-prepare ---
    if not leader.reachable or not leader.mempool:
        return None
    records = sorted(leader.mempool.values(), key=lambda r: (r.tick, r.record_id))
    block_a = build_block(height, leader.head_hash(), leader.validator_id, records)
    variants = [block_a]
    if leader.behavior is Behavior.EQUIVOCATE and len(records) >= 2:
        variants.append(build_block(height, leader.head_hash(),
                                    leader.validator_id, records[:-1]))
    others = [v for v in validators if v is not leader]
    rng.shuffle(others)
    split = rng.randint(0, len(others)) if len(variants) > 1 else len(others)
    # shown: what each validator was pre-prepared with (equivocators track it
    # so they can back each variant toward the peers they showed it to).
    shown: dict[str, Block] = {leader.validator_id: block_a}
    proposals: dict[str, Block] = {}    # id -> proposal it will vote for
    for i, v in enumerate(others):
        block = variants[0] if i < split else variants[-1]
        if not v.reachable:
            continue
        shown[v.validator_id] = block
        if not v.honest:
            proposals[v.validator_id] = block
            continue
        sig = leader.key.sign(_preprepare_payload(height, view, block.block_hash))
        # Receiver-side checks: leader signature plus full block validation.
        if not crypto.verify(leader.key.public_bytes,
                             _preprepare_payload(height, view, block.block_hash), sig):
            continue
        if _valid_proposal(block, v, scanner):
            proposals[v.validator_id] = block
    proposals[leader.validator_id] = block_a

    # --- prepare ---
    # votes[to][hash] = set of voter ids; every validator sees its own vote.
    votes: dict[str, dict[str, set]] = {v.validator_id: {} for v in validators}
    prepare_msgs = []
    for v in validators:
        if not v.reachable or v.validator_id not in proposals:
            continue
        if v.honest:
            targets = [(w, proposals[v.validator_id].block_hash) for w in validators]
        elif v is leader:
            # Equivocating leader backs, per recipient, the variant it showed.
            targets = [(w, shown.get(w.validator_id, block_a).block_hash)
                       for w in validators]
        else:
            # Equivocating non-leader: back a fabricated hash toward a random
            # subset and the real one toward the rest.
            real = proposals[v.validator_id].block_hash
            fake = crypto.digest(b"conflict" + real.encode()).hex()
            targets = [(w, real if rng.random() < 0.5 else fake)
                       for w in validators]
        for w, h in targets:
            sig = v.key.sign(_prepare_payload(height, view, h))
            prepare_msgs.append((v, w, h, sig))
    rng.shuffle(prepare_msgs)
    for sender, receiver, block_hash, sig in prepare_msgs:
        if not receiver.reachable:
            continue
        if not crypto.verify(sender.key.public_bytes,
                             _prepare_payload(height, view, block_hash), sig):
            continue
        votes[receiver.validator_id].setdefault(block_hash, set()).add(sender.validator_id)

    # --- commit ---
    commit_msgs = []
    for v in validators:
        if not v.reachable or v.validator_id not in proposals:
            continue
        block_hash = proposals[v.validator_id].block_hash
        if len(votes[v.validator_id].get(block_hash, ())) < quorum:
            continue
        if v.honest:
            sig = v.sign_commit(height, block_hash)
            for w in validators:
                commit_msgs.append((v, w, block_hash, sig))
        else:
            # Byzantine committer: withhold from a random subset.
            sig = v.sign_commit(height, block_hash)
            for w in validators:
                if rng.random() < 0.5:
                    commit_msgs.append((v, w, block_hash, sig))
    rng.shuffle(commit_msgs)
    commits: dict[str, dict[str, dict[str, str]]] = {v.validator_id: {} for v in validators}
    for sender, receiver, block_hash, sig in commit_msgs:
        if not receiver.reachable:
            continue
        if not crypto.verify(sender.key.public_bytes,
                             commit_message(height, block_hash), bytes.fromhex(sig)):
            continue
        commits[receiver.validator_id].setdefault(block_hash, {})[sender.validator_id] = sig

    # --- certificate ---
    decided: list[tuple[str, Block, dict]] = []
    for v in validators:
        if not v.honest or v.validator_id not in proposals:
            continue
        block = proposals[v.validator_id]
        sigs = commits[v.validator_id].get(block.block_hash, {})
        if len(sigs) >= quorum:
            decided.append((v.validator_id, block, sigs))
    if not decided:
        return None
    hashes = {block.block_hash for _, block, _ in decided}
    if len(hashes) != 1:
        raise RuntimeError("safety violation: conflicting commits at one height")
    decided.sort(key=lambda item: item[0])
    _, block, sigs = decided[0]
    block.quorum_sigs = sorted(sigs.items())
    return block


def _adopt(validators, block: Block) -> None:
    """Announce the certified block; honest validators append and clean up."""
    for v in validators:
        if not v.honest:
            continue
        if len(v.chain) == block.height and v.head_hash() == block.prev_hash:
            v.chain.append(block)
        for rec in block.records:
            v.mempool.pop(rec.record_id, None)
