"""Append-only, hash-linked ledger of signed generation records.

A model owner registers each generated image as a :class:`LedgerEntry`:
model digest, seed, noise recipe, and the SHA-256 of the 8-bit quantized
image, signed with Ed25519. A verifying node accepts an entry only after
regenerating the image from the model database and recomputing its hash.

Verification order matters for diagnostics: the model must exist, then
the regenerated image must match, then the signature must hold. A tampered
seed therefore reports ``image-hash-mismatch`` whenever the tamper changes
the image, and ``signature-invalid`` when it does not.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from deepattrib.generators import GeneratorModel, NoiseInput, deserialize, generate, sample_noise, serialize
from deepattrib.tensor import Tensor

SEED_FIELD_BYTES = 512  # room for a 128-dim float32 seed
DATETIME_BYTES = 32
GENESIS_HASH = bytes(32)
BLOCK_NAME_DIGITS = 8

OK = "ok"
MODEL_NOT_FOUND = "model-not-found"
KEY_NOT_REGISTERED = "key-not-registered"
MALFORMED_SEED = "malformed-seed"
NOISE_DIGEST_MISMATCH = "noise-digest-mismatch"
IMAGE_HASH_MISMATCH = "image-hash-mismatch"
SIGNATURE_INVALID = "signature-invalid"
BLOCK_HASH_MISMATCH = "block-hash-mismatch"
LINK_BROKEN = "previous-hash-mismatch"
INDEX_OUT_OF_ORDER = "index-out-of-order"
ENTRY_INVALID = "entry-invalid"


class LedgerError(RuntimeError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def quantize8(image) -> np.ndarray:
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def image_hash(image) -> bytes:
    """SHA-256 over the shape header and the 8-bit quantized pixels."""
    q = quantize8(image)
    header = struct.pack("<B", q.ndim) + struct.pack(f"<{q.ndim}I", *q.shape)
    return sha256(header + q.tobytes())


# --- keys -----------------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    private: Ed25519PrivateKey
    public: Ed25519PublicKey

    @classmethod
    def generate(cls, seed: bytes | None = None) -> "KeyPair":
        """A fresh key pair; a 32-byte ``seed`` makes it reproducible."""
        priv = Ed25519PrivateKey.from_private_bytes(seed) if seed is not None else Ed25519PrivateKey.generate()
        return cls(priv, priv.public_key())

    @property
    def public_bytes(self) -> bytes:
        return public_key_bytes(self.public)

    def sign(self, message: bytes) -> bytes:
        return self.private.sign(message)


def public_key_bytes(key: Ed25519PublicKey) -> bytes:
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# --- model database ---------------------------------------------------------------


class ModelDatabase:
    """Content-addressed model store plus the owner key registered per model.

    With a ``root`` directory, models live in ``<hex digest>.bin`` and keys in
    ``<hex digest>.pub``; otherwise everything is kept in memory.
    """

    def __init__(self, root: str | Path | None = None) -> None:
        self.root = Path(root) if root is not None else None
        self._blobs: dict[bytes, bytes] = {}
        self._keys: dict[bytes, bytes] = {}
        self._models: dict[bytes, GeneratorModel] = {}
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def store(self, model: GeneratorModel, owner: bytes | None = None) -> bytes:
        blob = serialize(model)
        digest = sha256(blob)
        if self.root is not None:
            path = self.root / f"{digest.hex()}.bin"
            if not path.exists():
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(blob)
                os.replace(tmp, path)
        else:
            self._blobs[digest] = blob
        self._models[digest] = model
        if owner is not None:
            self.register_key(digest, owner)
        return digest

    def register_key(self, digest: bytes, public: bytes) -> None:
        if self.root is not None:
            (self.root / f"{digest.hex()}.pub").write_bytes(public)
        else:
            self._keys[digest] = public

    def owner_key(self, digest: bytes) -> bytes | None:
        if self.root is not None:
            path = self.root / f"{digest.hex()}.pub"
            return path.read_bytes() if path.exists() else None
        return self._keys.get(digest)

    def retrieve(self, digest: bytes) -> bytes | None:
        if self.root is not None:
            path = self.root / f"{digest.hex()}.bin"
            blob = path.read_bytes() if path.exists() else None
        else:
            blob = self._blobs.get(digest)
        if blob is not None and sha256(blob) != digest:
            raise LedgerError(f"database corruption: content of {digest.hex()} does not match its key")
        return blob

    def model(self, digest: bytes) -> GeneratorModel | None:
        if digest not in self._models:
            blob = self.retrieve(digest)
            if blob is None:
                return None
            self._models[digest] = deserialize(blob)
        return self._models[digest]

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._models or self.retrieve(digest) is not None


# --- entries ----------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseRecipe:
    """What a verifier needs to rebuild a :class:`NoiseInput`."""

    seed: int = 0
    psi: float = 0.7
    enabled: bool = True

    def build(self, model: GeneratorModel) -> NoiseInput:
        return sample_noise(model, self.seed, psi=self.psi, enabled=self.enabled)


def encode_seed(s: np.ndarray) -> bytes:
    raw = np.ascontiguousarray(s, dtype="<f4").tobytes()
    if len(raw) > SEED_FIELD_BYTES:
        raise LedgerError(f"seed of {len(raw)} bytes exceeds the {SEED_FIELD_BYTES}-byte field")
    return raw + bytes(SEED_FIELD_BYTES - len(raw))


def decode_seed(field_bytes: bytes, seed_dim: int) -> np.ndarray | None:
    """The seed vector, or None when the padding is not all zeros."""
    n = seed_dim * 4
    if len(field_bytes) != SEED_FIELD_BYTES or any(field_bytes[n:]):
        return None
    return np.frombuffer(field_bytes[:n], dtype="<f4").astype(np.float32)


@dataclass(frozen=True)
class LedgerEntry:
    record_id: int
    datetime: str
    model_hash: bytes
    seed: bytes
    seed_dim: int
    noise_seed: int
    noise_psi: float
    noise_enabled: bool
    noise_digest: bytes
    image_hash: bytes
    signature: bytes = b""

    def signed_fields(self) -> bytes:
        """Canonical fixed-width encoding of every field except the signature, in name order."""
        dt = self.datetime.encode("ascii")
        if len(dt) > DATETIME_BYTES:
            raise LedgerError("datetime string too long")
        parts = {
            "datetime": dt + bytes(DATETIME_BYTES - len(dt)),
            "image_hash": self.image_hash,
            "model_hash": self.model_hash,
            "noise_digest": self.noise_digest,
            "noise_enabled": struct.pack("<B", int(self.noise_enabled)),
            "noise_psi": struct.pack("<f", self.noise_psi),
            "noise_seed": struct.pack("<Q", self.noise_seed),
            "record_id": struct.pack("<Q", self.record_id),
            "seed": self.seed,
            "seed_dim": struct.pack("<H", self.seed_dim),
        }
        return b"".join(parts[k] for k in sorted(parts))

    def encode(self) -> bytes:
        return self.signed_fields() + self.signature

    def to_json(self) -> dict:
        b64 = lambda b: base64.b64encode(b).decode()  # noqa: E731
        return {
            "datetime": self.datetime,
            "image_hash": b64(self.image_hash),
            "model_hash": b64(self.model_hash),
            "noise_digest": b64(self.noise_digest),
            "noise_enabled": self.noise_enabled,
            "noise_psi": self.noise_psi,
            "noise_seed": self.noise_seed,
            "record_id": self.record_id,
            "seed": b64(self.seed),
            "seed_dim": self.seed_dim,
            "signature": b64(self.signature),
        }

    @classmethod
    def from_json(cls, d: dict) -> "LedgerEntry":
        b = base64.b64decode
        return cls(
            record_id=int(d["record_id"]),
            datetime=d["datetime"],
            model_hash=b(d["model_hash"]),
            seed=b(d["seed"]),
            seed_dim=int(d["seed_dim"]),
            noise_seed=int(d["noise_seed"]),
            noise_psi=float(d["noise_psi"]),
            noise_enabled=bool(d["noise_enabled"]),
            noise_digest=b(d["noise_digest"]),
            image_hash=b(d["image_hash"]),
            signature=b(d["signature"]),
        )

    @property
    def recipe(self) -> NoiseRecipe:
        return NoiseRecipe(self.noise_seed, self.noise_psi, self.noise_enabled)


@dataclass(frozen=True)
class Verification:
    ok: bool
    diagnostic: str
    index: int | None = None  # first broken block, for chain checks

    def __bool__(self) -> bool:
        return self.ok


def regenerate(model: GeneratorModel, entry: LedgerEntry) -> np.ndarray | None:
    s = decode_seed(entry.seed, entry.seed_dim)
    if s is None or entry.seed_dim != model.arch.seed_dim:
        return None
    return generate(model, s, entry.recipe.build(model)).data


def verify_entry(entry: LedgerEntry, db: ModelDatabase) -> Verification:
    """Regenerate the image from the database and check hashes, then the signature."""
    model = db.model(entry.model_hash)
    if model is None:
        return Verification(False, MODEL_NOT_FOUND)
    noise = entry.recipe.build(model)
    if sha256(noise.to_bytes()) != entry.noise_digest:
        return Verification(False, NOISE_DIGEST_MISMATCH)
    try:
        img = regenerate(model, entry)
    except Exception:  # a tampered seed can decode to NaN/inf
        img = None
    if img is None:
        return Verification(False, MALFORMED_SEED)
    if image_hash(img) != entry.image_hash:
        return Verification(False, IMAGE_HASH_MISMATCH)
    owner = db.owner_key(entry.model_hash)
    if owner is None:
        return Verification(False, KEY_NOT_REGISTERED)
    if not verify_signature(owner, entry.signature, entry.signed_fields()):
        return Verification(False, SIGNATURE_INVALID)
    return Verification(True, OK)


# --- blocks and the chain ---------------------------------------------------------


@dataclass(frozen=True)
class Block:
    index: int
    previous_block_hash: bytes
    entries: tuple[LedgerEntry, ...]
    block_hash: bytes

    @staticmethod
    def compute_hash(index: int, previous: bytes, entries) -> bytes:
        h = hashlib.sha256()
        h.update(struct.pack("<QI", index, len(entries)))
        h.update(previous)
        for e in entries:
            enc = e.encode()
            h.update(struct.pack("<I", len(enc)))
            h.update(enc)
        return h.digest()

    def to_json(self) -> str:
        d = {
            "block_hash": base64.b64encode(self.block_hash).decode(),
            "entries": [e.to_json() for e in self.entries],
            "index": self.index,
            "previous_block_hash": base64.b64encode(self.previous_block_hash).decode(),
            "schema": "ledger-block/1",
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Block":
        d = json.loads(text)
        return cls(
            index=int(d["index"]),
            previous_block_hash=base64.b64decode(d["previous_block_hash"]),
            entries=tuple(LedgerEntry.from_json(e) for e in d["entries"]),
            block_hash=base64.b64decode(d["block_hash"]),
        )


@dataclass
class Chain:
    """Blocks plus entries awaiting inclusion. Optionally persisted to ``root``."""

    blocks: list[Block] = field(default_factory=list)
    pending: list[LedgerEntry] = field(default_factory=list)
    root: Path | None = None
    _next_id: int = 0

    @classmethod
    def open(cls, root: str | Path) -> "Chain":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        blocks = [Block.from_json(p.read_text()) for p in sorted(root.glob("*.json"))]
        chain = cls(blocks=blocks, root=root)
        chain._next_id = 1 + max((e.record_id for b in blocks for e in b.entries), default=-1)
        return chain

    def next_record_id(self) -> int:
        rid = self._next_id
        self._next_id += 1
        return rid

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].block_hash if self.blocks else GENESIS_HASH

    def entries(self):
        for b in self.blocks:
            yield from b.entries

    def _persist(self, block: Block) -> None:
        if self.root is None:
            return
        path = self.root / f"{block.index:0{BLOCK_NAME_DIGITS}d}.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(block.to_json())
        os.replace(tmp, path)


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def make_entry(
    record_id: int,
    db: ModelDatabase,
    g: GeneratorModel,
    s,
    noise: NoiseRecipe,
    keys: KeyPair,
    timestamp: str | None = None,
) -> tuple[LedgerEntry, np.ndarray]:
    digest = db.store(g)
    if db.owner_key(digest) is None:
        db.register_key(digest, keys.public_bytes)
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float32)
    # the entry stores psi as float32; generate with exactly what a verifier will decode
    noise = NoiseRecipe(int(noise.seed), float(np.float32(noise.psi)), bool(noise.enabled))
    r = noise.build(g)
    img = generate(g, s, r).data
    entry = LedgerEntry(
        record_id=record_id,
        datetime=timestamp or utc_now(),
        model_hash=digest,
        seed=encode_seed(s),
        seed_dim=int(s.shape[0]),
        noise_seed=int(noise.seed),
        noise_psi=noise.psi,
        noise_enabled=bool(noise.enabled),
        noise_digest=sha256(r.to_bytes()),
        image_hash=image_hash(img),
    )
    entry = replace(entry, signature=keys.sign(entry.signed_fields()))
    return entry, img


def register_generation(
    chain: Chain,
    db: ModelDatabase,
    g: GeneratorModel,
    s,
    r: NoiseRecipe,
    keys: KeyPair,
    timestamp: str | None = None,
) -> LedgerEntry:
    """Generate, sign, verify, and queue one record for the next block."""
    entry, _ = make_entry(chain.next_record_id(), db, g, s, r, keys, timestamp)
    check = verify_entry(entry, db)
    if not check:
        raise LedgerError(f"freshly registered entry failed verification: {check.diagnostic}")
    chain.pending.append(entry)
    return entry


def append_block(chain: Chain, entries=None, db: ModelDatabase | None = None, verify: bool = True) -> Block:
    """Seal entries (default: all pending) into a new block linked to the head.

    Record ids must be strictly increasing across the whole chain.
    """
    entries = list(chain.pending if entries is None else entries)
    last = max((e.record_id for e in chain.entries()), default=-1)
    for e in entries:
        if e.record_id <= last:
            raise LedgerError(f"record {e.record_id} is out of order (last sealed id {last})")
        last = e.record_id
        if verify:
            if db is None:
                raise LedgerError("verification needs the model database")
            check = verify_entry(e, db)
            if not check:
                raise LedgerError(f"record {e.record_id} rejected: {check.diagnostic}")
    index = len(chain.blocks)
    prev = chain.head_hash
    block = Block(index, prev, tuple(entries), Block.compute_hash(index, prev, entries))
    chain.blocks.append(block)
    sealed = {e.record_id for e in entries}
    chain.pending = [e for e in chain.pending if e.record_id not in sealed]
    chain._persist(block)
    return block


def verify_chain(chain: Chain, db: ModelDatabase | None = None) -> Verification:
    """Check every link and block hash, and (with ``db``) every entry by regeneration.

    Returns the first broken block index on failure.
    """
    prev = GENESIS_HASH
    last_id = -1
    for i, b in enumerate(chain.blocks):
        if b.index != i:
            return Verification(False, INDEX_OUT_OF_ORDER, i)
        if b.previous_block_hash != prev:
            return Verification(False, LINK_BROKEN, i)
        if Block.compute_hash(b.index, b.previous_block_hash, b.entries) != b.block_hash:
            return Verification(False, BLOCK_HASH_MISMATCH, i)
        for e in b.entries:
            if e.record_id <= last_id:
                return Verification(False, INDEX_OUT_OF_ORDER, i)
            last_id = e.record_id
            if db is not None:
                check = verify_entry(e, db)
                if not check:
                    return Verification(False, f"{ENTRY_INVALID}:{check.diagnostic}", i)
        prev = b.block_hash
    return Verification(True, OK)


def validate_image(chain: Chain, image) -> list[LedgerEntry]:
    """Every sealed entry whose image hash equals the query's (exhaustive scan)."""
    h = image_hash(image)
    return [e for e in chain.entries() if e.image_hash == h]


class ImageIndex:
    """Hash index over a chain's sealed entries; same answers as :func:`validate_image`."""

    def __init__(self, chain: Chain) -> None:
        self._by_hash: dict[bytes, list[LedgerEntry]] = {}
        for e in chain.entries():
            self._by_hash.setdefault(e.image_hash, []).append(e)

    def query(self, image) -> list[LedgerEntry]:
        return list(self._by_hash.get(image_hash(image), []))
