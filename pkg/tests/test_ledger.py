from __future__ import annotations

import dataclasses
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepattrib.generators import GeneratorArch, build_generator, generate, load_model
from deepattrib.ledger import (
    BLOCK_HASH_MISMATCH,
    IMAGE_HASH_MISMATCH,
    INDEX_OUT_OF_ORDER,
    KEY_NOT_REGISTERED,
    LINK_BROKEN,
    MALFORMED_SEED,
    MODEL_NOT_FOUND,
    NOISE_DIGEST_MISMATCH,
    OK,
    SEED_FIELD_BYTES,
    SIGNATURE_INVALID,
    Block,
    Chain,
    ImageIndex,
    KeyPair,
    LedgerEntry,
    LedgerError,
    ModelDatabase,
    NoiseRecipe,
    append_block,
    decode_seed,
    encode_seed,
    image_hash,
    make_entry,
    quantize8,
    register_generation,
    sha256,
    validate_image,
    verify_chain,
    verify_entry,
    verify_signature,
)

FIXTURES = Path(__file__).parent / "fixtures"
STAMP = "2024-01-01T00:00:00.000000Z"
KEYS = KeyPair.generate(bytes(range(32)))


@pytest.fixture(scope="module")
def plain():
    return load_model(FIXTURES / "plain_seed7.bin")


@pytest.fixture(scope="module")
def style():
    return load_model(FIXTURES / "style_seed7.bin")


def seed(model, k):
    return np.random.default_rng(k).standard_normal(model.arch.seed_dim, dtype=np.float32)


def fresh(models, n=3):
    """An in-memory db and a chain with one block of ``n`` entries per model."""
    db, chain = ModelDatabase(), Chain()
    for m in models:
        for k in range(n):
            register_generation(chain, db, m, seed(m, k), NoiseRecipe(k), KEYS, STAMP)
    append_block(chain, db=db)
    return db, chain


def flip_bit(data: bytes, bit: int) -> bytes:
    b = bytearray(data)
    b[bit // 8] ^= 1 << (bit % 8)
    return bytes(b)


class TestKeys:
    def test_deterministic_from_seed(self):
        assert KeyPair.generate(bytes(range(32))).public_bytes == KEYS.public_bytes

    def test_sign_verify_round_trip(self):
        sig = KEYS.sign(b"message")
        assert verify_signature(KEYS.public_bytes, sig, b"message")

    @settings(max_examples=100)
    @given(st.binary(min_size=1, max_size=64), st.data())
    def test_any_single_bit_mutation_fails(self, msg, data):
        sig = KEYS.sign(msg)
        bit = data.draw(st.integers(0, len(msg) * 8 - 1))
        assert not verify_signature(KEYS.public_bytes, sig, flip_bit(msg, bit))

    def test_other_key_fails(self):
        other = KeyPair.generate(bytes(32))
        assert not verify_signature(other.public_bytes, KEYS.sign(b"m"), b"m")


class TestEncoding:
    @settings(max_examples=100)
    @given(st.integers(1, 128), st.integers(0, 2**32 - 1))
    def test_seed_field_fixed_width_round_trip(self, dim, k):
        s = np.random.default_rng(k).standard_normal(dim, dtype=np.float32)
        field = encode_seed(s)
        assert len(field) == SEED_FIELD_BYTES
        assert np.array_equal(decode_seed(field, dim), s)

    def test_seed_too_long(self):
        with pytest.raises(LedgerError):
            encode_seed(np.zeros(129, np.float32))

    def test_nonzero_padding_rejected(self):
        field = bytearray(encode_seed(np.ones(4, np.float32)))
        field[-1] = 1
        assert decode_seed(bytes(field), 4) is None

    def test_entry_length_fixed_across_seeds(self, plain):
        db = ModelDatabase()
        lengths = {len(make_entry(k, db, plain, seed(plain, k), NoiseRecipe(k), KEYS, STAMP)[0].encode()) for k in range(100)}
        assert len(lengths) == 1

    def test_json_round_trip(self, style):
        entry, _ = make_entry(3, ModelDatabase(), style, seed(style, 1), NoiseRecipe(5, 0.5), KEYS, STAMP)
        assert LedgerEntry.from_json(entry.to_json()) == entry

    def test_image_hash_quantizes(self):
        x = np.full((1, 4, 4), 100 / 255)
        assert image_hash(x) == image_hash(x + 1e-4)
        assert image_hash(x) != image_hash(x + 1 / 255)
        assert quantize8(np.array([-1.0, 2.0])).tolist() == [0, 255]


class TestDatabase:
    def test_content_addressed(self, plain):
        db = ModelDatabase()
        digest = db.store(plain)
        assert sha256(db.retrieve(digest)) == digest and digest.hex() == plain.digest

    def test_directory_store(self, plain, tmp_path):
        digest = ModelDatabase(tmp_path).store(plain, KEYS.public_bytes)
        again = ModelDatabase(tmp_path)
        assert again.model(digest).digest == plain.digest
        assert again.owner_key(digest) == KEYS.public_bytes

    def test_corrupt_file_detected(self, plain, tmp_path):
        db = ModelDatabase(tmp_path)
        digest = db.store(plain)
        path = tmp_path / f"{digest.hex()}.bin"
        path.write_bytes(flip_bit(path.read_bytes(), 100))
        with pytest.raises(LedgerError, match="corruption"):
            ModelDatabase(tmp_path).retrieve(digest)

    def test_missing(self):
        assert ModelDatabase().retrieve(bytes(32)) is None


class TestRegisterAndVerify:
    def test_round_trip(self, style):
        db, chain = ModelDatabase(), Chain()
        e = register_generation(chain, db, style, seed(style, 0), NoiseRecipe(1), KEYS)
        assert verify_entry(e, db).diagnostic == OK

    def test_same_inputs_same_hash_distinct_ids(self, plain):
        db, chain = ModelDatabase(), Chain()
        a = register_generation(chain, db, plain, seed(plain, 0), NoiseRecipe(), KEYS)
        b = register_generation(chain, db, plain, seed(plain, 0), NoiseRecipe(), KEYS)
        assert a.image_hash == b.image_hash and a.record_id < b.record_id

    def test_image_hash_matches_generation(self, style):
        e, img = make_entry(0, ModelDatabase(), style, seed(style, 2), NoiseRecipe(4), KEYS)
        assert e.image_hash == image_hash(img)
        assert e.image_hash == image_hash(generate(style, seed(style, 2), NoiseRecipe(4).build(style)))

    def test_flip_seed_byte(self, plain):
        db = ModelDatabase()
        e, _ = make_entry(0, db, plain, seed(plain, 3), NoiseRecipe(), KEYS)
        field = bytearray(e.seed)
        field[2] ^= 0xFF  # high mantissa bits and the exponent's low bit of seed[0]
        assert verify_entry(dataclasses.replace(e, seed=bytes(field)), db).diagnostic == IMAGE_HASH_MISMATCH

    def test_sibling_model_swap(self, plain):
        sibling = build_generator(GeneratorArch(seed_dim=8, base_shape=(4, 8, 8), widths=(2, 1)), 8)
        db = ModelDatabase()
        db.store(sibling, KEYS.public_bytes)
        e, _ = make_entry(0, db, plain, seed(plain, 4), NoiseRecipe(), KEYS)
        swapped = dataclasses.replace(e, model_hash=bytes.fromhex(sibling.digest))
        assert verify_entry(swapped, db).diagnostic == IMAGE_HASH_MISMATCH

    def test_model_not_found(self, plain):
        e, _ = make_entry(0, ModelDatabase(), plain, seed(plain, 0), NoiseRecipe(), KEYS)
        assert verify_entry(e, ModelDatabase()).diagnostic == MODEL_NOT_FOUND

    def test_key_substitution(self, plain):
        db = ModelDatabase()
        db.store(plain, KEYS.public_bytes)
        forged, _ = make_entry(0, db, plain, seed(plain, 0), NoiseRecipe(), KeyPair.generate(bytes(32)))
        assert verify_entry(forged, db).diagnostic == SIGNATURE_INVALID

    def test_no_owner_key(self, plain):
        e, _ = make_entry(0, ModelDatabase(), plain, seed(plain, 0), NoiseRecipe(), KEYS)
        keyless = ModelDatabase()
        keyless.store(plain)
        assert verify_entry(e, keyless).diagnostic == KEY_NOT_REGISTERED

    @pytest.mark.parametrize(
        "field, value, diagnostic",
        [
            ("noise_seed", 99, NOISE_DIGEST_MISMATCH),
            ("noise_psi", 0.25, NOISE_DIGEST_MISMATCH),
            ("noise_digest", bytes(32), NOISE_DIGEST_MISMATCH),
            ("image_hash", bytes(32), IMAGE_HASH_MISMATCH),
            ("datetime", "2030-01-01T00:00:00.000000Z", SIGNATURE_INVALID),
            ("record_id", 77, SIGNATURE_INVALID),
            ("signature", bytes(64), SIGNATURE_INVALID),
            ("seed_dim", 7, MALFORMED_SEED),
        ],
    )
    def test_field_tampers(self, style, field, value, diagnostic):
        db = ModelDatabase()
        e, _ = make_entry(0, db, style, seed(style, 5), NoiseRecipe(3), KEYS, STAMP)
        assert verify_entry(dataclasses.replace(e, **{field: value}), db).diagnostic == diagnostic


class TestChain:
    def test_empty_block_is_valid(self):
        chain = Chain()
        block = append_block(chain, [], verify=False)
        assert block.entries == () and verify_chain(chain).ok

    def test_links_and_full_verification(self, plain, style):
        db, chain = fresh([plain, style])
        for k in range(2):
            register_generation(chain, db, plain, seed(plain, 10 + k), NoiseRecipe(), KEYS)
            append_block(chain, db=db)
        assert [b.previous_block_hash for b in chain.blocks[1:]] == [b.block_hash for b in chain.blocks[:-1]]
        assert verify_chain(chain, db).diagnostic == OK

    def test_unverified_entry_rejected(self, plain):
        db = ModelDatabase()
        e, _ = make_entry(0, db, plain, seed(plain, 0), NoiseRecipe(), KEYS)
        with pytest.raises(LedgerError, match="rejected"):
            append_block(Chain(), [dataclasses.replace(e, image_hash=bytes(32))], db)

    def test_out_of_order_rejected(self, plain):
        db, chain = fresh([plain], n=2)
        old = chain.blocks[0].entries[0]
        with pytest.raises(LedgerError, match="out of order"):
            append_block(chain, [old], db)

    def test_verify_needs_db(self, plain):
        e, _ = make_entry(0, ModelDatabase(), plain, seed(plain, 0), NoiseRecipe(), KEYS)
        with pytest.raises(LedgerError):
            append_block(Chain(), [e])

    def test_interior_tamper_pinpointed(self, plain):
        db, chain = ModelDatabase(), Chain()
        for k in range(4):
            register_generation(chain, db, plain, seed(plain, k), NoiseRecipe(), KEYS)
            append_block(chain, db=db)
        b = chain.blocks[2]
        bad = dataclasses.replace(b.entries[0], seed=encode_seed(seed(plain, 50)))
        chain.blocks[2] = dataclasses.replace(b, entries=(bad,))
        v = verify_chain(chain, db)
        assert not v.ok and v.index == 2 and v.diagnostic == BLOCK_HASH_MISMATCH

    def test_resealed_tamper_breaks_next_link(self, plain):
        db, chain = ModelDatabase(), Chain()
        for k in range(3):
            register_generation(chain, db, plain, seed(plain, k), NoiseRecipe(), KEYS)
            append_block(chain, db=db)
        b = chain.blocks[1]
        entries = (dataclasses.replace(b.entries[0], datetime="1999-01-01T00:00:00Z"),)
        chain.blocks[1] = Block(1, b.previous_block_hash, entries, Block.compute_hash(1, b.previous_block_hash, entries))
        v = verify_chain(chain)
        assert v.diagnostic == LINK_BROKEN and v.index == 2
        assert verify_chain(Chain(blocks=chain.blocks[:2]), db).diagnostic.endswith(SIGNATURE_INVALID)

    def test_reordered_blocks(self, plain):
        _, chain = fresh([plain], n=1)
        append_block(chain, [], verify=False)
        chain.blocks.reverse()
        assert verify_chain(chain).diagnostic == INDEX_OUT_OF_ORDER

    @settings(max_examples=60, deadline=None)
    @given(st.data())
    def test_any_single_bit_mutation_detected(self, data):
        plain = load_model(FIXTURES / "plain_seed7.bin")
        db, chain = _small_chain(plain)
        bi = data.draw(st.integers(0, len(chain.blocks) - 1))
        b = chain.blocks[bi]
        target = data.draw(st.sampled_from(["entry", "previous_block_hash", "block_hash"] if b.entries else ["previous_block_hash", "block_hash"]))
        if target == "entry":
            ei = data.draw(st.integers(0, len(b.entries) - 1))
            e = b.entries[ei]
            name = data.draw(st.sampled_from(["model_hash", "seed", "noise_digest", "image_hash", "signature"]))
            raw = getattr(e, name)
            bad = dataclasses.replace(e, **{name: flip_bit(raw, data.draw(st.integers(0, len(raw) * 8 - 1)))})
            entries = b.entries[:ei] + (bad,) + b.entries[ei + 1 :]
            chain.blocks[bi] = dataclasses.replace(b, entries=entries)
        else:
            raw = getattr(b, target)
            chain.blocks[bi] = dataclasses.replace(b, **{target: flip_bit(raw, data.draw(st.integers(0, 255)))})
        v = verify_chain(chain, db)
        assert not v.ok and v.index in (bi, bi + 1)

    def test_persist_and_reopen(self, plain, tmp_path):
        db = ModelDatabase(tmp_path / "db")
        chain = Chain.open(tmp_path / "chain")
        register_generation(chain, db, plain, seed(plain, 0), NoiseRecipe(), KEYS)
        append_block(chain, db=db)
        again = Chain.open(tmp_path / "chain")
        assert [b.block_hash for b in again.blocks] == [b.block_hash for b in chain.blocks]
        assert again.next_record_id() == 1
        assert sorted(p.name for p in (tmp_path / "chain").iterdir()) == ["00000000.json"]
        assert verify_chain(again, ModelDatabase(tmp_path / "db")).ok

    def test_verifies_in_separate_process(self, style, tmp_path):
        db = ModelDatabase(tmp_path / "db")
        chain = Chain.open(tmp_path / "chain")
        for k in range(3):
            register_generation(chain, db, style, seed(style, k), NoiseRecipe(k), KEYS)
        append_block(chain, db=db)
        code = (
            "import sys; from deepattrib.ledger import Chain, ModelDatabase, verify_chain;"
            "v = verify_chain(Chain.open(sys.argv[1]), ModelDatabase(sys.argv[2])); print(v.diagnostic)"
        )
        out = subprocess.run([sys.executable, "-c", code, str(tmp_path / "chain"), str(tmp_path / "db")], capture_output=True, text=True, check=True)
        assert out.stdout.strip() == OK

    def test_thousand_entry_audit_budget(self, plain):
        db, chain = ModelDatabase(), Chain()
        for k in range(1000):
            e, _ = make_entry(chain.next_record_id(), db, plain, seed(plain, k), NoiseRecipe(), KEYS, STAMP)
            chain.pending.append(e)
            if len(chain.pending) == 100:
                append_block(chain, verify=False)
        t = time.perf_counter()
        v = verify_chain(chain, db)
        assert v.ok and time.perf_counter() - t < 60


def _small_chain(plain):
    db, chain = ModelDatabase(), Chain()
    for k in range(3):
        register_generation(chain, db, plain, seed(plain, k), NoiseRecipe(), KEYS, STAMP)
        append_block(chain, db=db)
    return db, chain


class TestValidateImage:
    def test_registered_unregistered_and_one_level(self, style):
        db, chain = fresh([style], n=3)
        img = generate(style, seed(style, 1), NoiseRecipe(1).build(style)).data
        hits = validate_image(chain, img)
        assert [e.record_id for e in hits] == [1]
        assert validate_image(chain, np.zeros_like(img)) == []
        q = quantize8(img).astype(np.float64)
        q[0, 0, 0] = q[0, 0, 0] + 1 if q[0, 0, 0] < 255 else q[0, 0, 0] - 1
        assert validate_image(chain, q / 255) == []

    def test_pending_not_returned(self, plain):
        db, chain = ModelDatabase(), Chain()
        register_generation(chain, db, plain, seed(plain, 0), NoiseRecipe(), KEYS)
        assert validate_image(chain, generate(plain, seed(plain, 0)).data) == []

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=8), st.integers(0, 8))
    def test_index_matches_scan(self, keys, probe):
        plain = load_model(FIXTURES / "plain_seed7.bin")
        db, chain = ModelDatabase(), Chain()
        for k in keys:
            register_generation(chain, db, plain, seed(plain, k), NoiseRecipe(), KEYS, STAMP)
        append_block(chain, db=db)
        img = generate(plain, seed(plain, probe)).data
        assert ImageIndex(chain).query(img) == validate_image(chain, img)
        assert bool(validate_image(chain, img)) == (probe in keys)
