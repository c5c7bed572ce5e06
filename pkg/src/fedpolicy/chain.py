"""Append-only hash-linked store of (global model, aggregation policy) blocks.

Block encoding (little-endian)::

    index u64 | prev_hash 32 | payload_hash 32 | block_hash 32
    | u32 len | model bytes | u32 len | policy record

``payload_hash = sha256(u32 len | model | u32 len | policy)`` and
``block_hash = sha256(index u64 | prev_hash | payload_hash)``. A chain file is
the concatenation of ``u32 len | block`` records.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .canon import CanonError, canonical_deserialize, canonical_serialize, model_hash
from .model import ModelParams
from .policy import AggregationPolicy, PolicyState, policy_bytes

ZERO_HASH = bytes(32)
_HEAD = struct.Struct("<Q32s32s32s")


class ChainError(Exception):
    pass


class ChainFormatError(ChainError):
    pass


def _lp(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def payload_digest(model_bytes: bytes, policy_record: bytes) -> bytes:
    return hashlib.sha256(_lp(model_bytes) + _lp(policy_record)).digest()


def header_digest(index: int, prev_hash: bytes, payload_hash: bytes) -> bytes:
    return hashlib.sha256(struct.pack("<Q", index) + prev_hash + payload_hash).digest()


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    model_bytes: bytes
    policy_record: bytes
    payload_hash: bytes
    block_hash: bytes

    @classmethod
    def create(cls, index: int, prev_hash: bytes, model_bytes: bytes, policy_record: bytes) -> "Block":
        ph = payload_digest(model_bytes, policy_record)
        return cls(index, prev_hash, model_bytes, policy_record, ph, header_digest(index, prev_hash, ph))

    def to_bytes(self) -> bytes:
        return (_HEAD.pack(self.index, self.prev_hash, self.payload_hash, self.block_hash)
                + _lp(self.model_bytes) + _lp(self.policy_record))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        try:
            index, prev, ph, bh = _HEAD.unpack_from(data)
            pos = _HEAD.size
            parts = []
            for _ in range(2):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + n > len(data):
                    raise ChainFormatError("payload length runs past block end")
                parts.append(bytes(data[pos:pos + n]))
                pos += n
        except struct.error as exc:
            raise ChainFormatError("truncated block") from exc
        if pos != len(data):
            raise ChainFormatError("trailing bytes in block")
        return cls(index, prev, parts[0], parts[1], ph, bh)

    def model(self) -> ModelParams:
        return canonical_deserialize(self.model_bytes)

    def policy(self) -> AggregationPolicy:
        return AggregationPolicy.from_record(json.loads(self.policy_record))


@dataclass(frozen=True)
class ChainVerdict:
    ok: bool
    bad_index: int | None = None
    reason: str = ""

    def __bool__(self):
        return self.ok


@dataclass
class Chain:
    blocks: list[Block] = field(default_factory=list)

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].block_hash if self.blocks else ZERO_HASH

    def __len__(self):
        return len(self.blocks)

    def to_bytes(self) -> bytes:
        return b"".join(_lp(b.to_bytes()) for b in self.blocks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chain":
        blocks, pos = [], 0
        while pos < len(data):
            if pos + 4 > len(data):
                raise ChainFormatError(f"truncated length prefix at byte {pos}")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise ChainFormatError(f"block {len(blocks)} runs past end of file")
            blocks.append(Block.from_bytes(data[pos:pos + n]))
            pos += n
        return cls(blocks)

    def save(self, path) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Chain":
        return cls.from_bytes(Path(path).read_bytes())

    def find(self, global_model_id: int, fed_round: int) -> Block | None:
        for block in reversed(self.blocks):
            pol = block.policy()
            if pol.global_model_id == global_model_id and pol.fed_round == fed_round:
                return block
        return None


def verify_block(block: Block, expected_index: int, expected_prev: bytes) -> str:
    """Empty string when the block is sound, otherwise the first problem found."""
    if block.index != expected_index:
        return f"index {block.index} where {expected_index} expected"
    if block.prev_hash != expected_prev:
        return "prev_hash does not match previous block"
    if payload_digest(block.model_bytes, block.policy_record) != block.payload_hash:
        return "payload hash mismatch"
    if header_digest(block.index, block.prev_hash, block.payload_hash) != block.block_hash:
        return "block hash mismatch"
    try:
        model = block.model()
        pol = block.policy()
    except (CanonError, ValueError, KeyError, TypeError, AttributeError) as exc:
        return f"undecodable payload: {exc}"
    if pol.global_model_hash != model_hash(model):
        return "stored model does not match policy hash"
    return ""


def verify_chain(chain: Chain) -> ChainVerdict:
    prev = ZERO_HASH
    for i, block in enumerate(chain.blocks):
        problem = verify_block(block, i, prev)
        if problem:
            return ChainVerdict(False, i, problem)
        prev = block.block_hash
    return ChainVerdict(True)


def verify_chain_bytes(data: bytes) -> ChainVerdict:
    try:
        chain = Chain.from_bytes(data)
    except ChainFormatError as exc:
        return ChainVerdict(False, None, f"unparseable chain: {exc}")
    return verify_chain(chain)


def append_block(chain: Chain, model: ModelParams, policy: AggregationPolicy) -> Chain:
    if policy.state != PolicyState.FINALIZED:
        raise ChainError(f"{policy.contract_id} is {policy.state.name}; only finalized policies are stored")
    if policy.global_model_hash != model_hash(model):
        raise ChainError("model does not match the policy's recorded hash")
    block = Block.create(len(chain.blocks), chain.head_hash, canonical_serialize(model), policy_bytes(policy))
    chain.blocks.append(block)
    return chain
