"""Owner keys, signatures and the signature -> watermark transform.

Signatures are RSA-2048 PKCS#1 v1.5 over SHA-256. The padding is
deterministic, so a credential always re-derives the same watermark.
"""
from __future__ import annotations

import base64
import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa

from .errors import DimensionError, KeyFormatError
from .filter import FilterPattern

KEY_BITS = 2048
PUBLIC_EXPONENT = 65537
DEFAULT_EXTREME_VALUE = 2000.0
DEFAULT_BLOCK_SIZE = 6


@dataclass(frozen=True)
class OwnerKeys:
    private_key: rsa.RSAPrivateKey
    public_key: rsa.RSAPublicKey
    key_id: str

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "private.pem").write_bytes(
            self.private_key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )
        (d / "public.pem").write_bytes(public_pem(self.public_key))
        (d / "key_id").write_text(self.key_id + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "OwnerKeys":
        d = Path(directory)
        priv = load_private_key((d / "private.pem").read_bytes())
        return cls(priv, priv.public_key(), key_id_of(priv.public_key()))


@dataclass(frozen=True)
class VerifierString:
    owner_id: str
    timestamp: str

    def __post_init__(self):
        if "|" in self.owner_id:
            raise ValueError("owner_id must not contain '|'")

    @property
    def encoded(self) -> bytes:
        return f"{self.owner_id}|{self.timestamp}".encode("utf-8")


@dataclass(frozen=True)
class OwnershipCredential:
    verifier: VerifierString
    signature: bytes
    public_key: rsa.RSAPublicKey

    def to_json(self) -> dict:
        return {
            "owner_id": self.verifier.owner_id,
            "timestamp": self.verifier.timestamp,
            "signature_b64": base64.b64encode(self.signature).decode("ascii"),
            "public_key_pem": public_pem(self.public_key).decode("ascii"),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "OwnershipCredential":
        try:
            pub = serialization.load_pem_public_key(rec["public_key_pem"].encode("ascii"))
        except (ValueError, TypeError) as exc:
            raise KeyFormatError(f"bad public key in credential: {exc}") from exc
        return cls(
            VerifierString(rec["owner_id"], rec["timestamp"]),
            base64.b64decode(rec["signature_b64"]),
            pub,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "OwnershipCredential":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class WatermarkSpec:
    """Derived watermark: filter pattern, true-embedding label, extreme value."""

    pattern: FilterPattern
    target_label: int
    extreme_value: float = DEFAULT_EXTREME_VALUE

    def __post_init__(self):
        if self.target_label < 0:
            raise ValueError("target_label must be non-negative")
        if self.extreme_value <= 0:
            raise ValueError("extreme_value must be positive")


def public_pem(key: rsa.RSAPublicKey) -> bytes:
    return key.public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo
    )


def key_id_of(public_key: rsa.RSAPublicKey) -> str:
    der = public_key.public_bytes(
        serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
    )
    return hashlib.sha256(der).hexdigest()[:16]


def load_private_key(data: bytes) -> rsa.RSAPrivateKey:
    try:
        key = serialization.load_pem_private_key(data, password=None)
    except (ValueError, TypeError) as exc:
        raise KeyFormatError(f"cannot parse private key: {exc}") from exc
    if not isinstance(key, rsa.RSAPrivateKey):
        raise KeyFormatError("private key is not an RSA key")
    return key


def _seeded_prime(rng: random.Random, bits: int) -> int:
    while True:
        cand = rng.getrandbits(bits) | (0b11 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(cand))
        if p.bit_length() == bits and gmpy2.gcd(PUBLIC_EXPONENT, p - 1) == 1:
            return p


def _seeded_private_key(seed: int) -> rsa.RSAPrivateKey:
    rng = random.Random(seed)
    half = KEY_BITS // 2
    p = _seeded_prime(rng, half)
    q = _seeded_prime(rng, half)
    while q == p:
        q = _seeded_prime(rng, half)
    if p < q:
        p, q = q, p
    e = PUBLIC_EXPONENT
    d = pow(e, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(e, p * q),
    )
    return numbers.private_key()


def generate_keys(seed: int | None = None) -> OwnerKeys:
    """Create an RSA-2048 key pair; reproducible when ``seed`` is given."""
    if seed is None:
        priv = rsa.generate_private_key(public_exponent=PUBLIC_EXPONENT, key_size=KEY_BITS)
    else:
        priv = _seeded_private_key(seed)
    pub = priv.public_key()
    return OwnerKeys(priv, pub, key_id_of(pub))


def _as_private_key(key) -> rsa.RSAPrivateKey:
    if isinstance(key, OwnerKeys):
        return key.private_key
    if isinstance(key, rsa.RSAPrivateKey):
        return key
    if isinstance(key, (bytes, str)):
        return load_private_key(key.encode() if isinstance(key, str) else key)
    raise KeyFormatError(f"unsupported private key type {type(key).__name__}")


def _message(verifier) -> bytes:
    return verifier.encoded if isinstance(verifier, VerifierString) else bytes(verifier)


def sign(private_key, verifier: VerifierString | bytes) -> bytes:
    msg = _message(verifier)
    if not msg:
        raise ValueError("cannot sign an empty verifier string")
    key = _as_private_key(private_key)
    return key.sign(msg, padding.PKCS1v15(), hashes.SHA256())


def verify_sig(public_key, signature: bytes, verifier: VerifierString | bytes) -> bool:
    """True iff ``signature`` is valid over the verifier under ``public_key``.

    Never raises: malformed keys or signatures simply fail.
    """
    if isinstance(public_key, OwnerKeys):
        public_key = public_key.public_key
    if not isinstance(public_key, rsa.RSAPublicKey):
        return False
    try:
        public_key.verify(bytes(signature), _message(verifier), padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def make_credential(keys: OwnerKeys, owner_id: str, timestamp: str) -> OwnershipCredential:
    v = VerifierString(owner_id, timestamp)
    return OwnershipCredential(v, sign(keys.private_key, v), keys.public_key)


def hash_int(index: int, sig: bytes) -> int:
    """Domain-separated SHA-256: ``int(sha256(bytes([index]) + sig))``, big-endian."""
    return int.from_bytes(hashlib.sha256(bytes([index]) + sig).digest(), "big")


def transform(
    signature: bytes,
    height: int,
    width: int,
    num_classes: int,
    block_size: int = DEFAULT_BLOCK_SIZE,
    extreme_value: float = DEFAULT_EXTREME_VALUE,
) -> WatermarkSpec:
    n = block_size
    if n < 1 or n > min(height, width):
        raise DimensionError(f"block size {n} does not fit a {height}x{width} input")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if n * n > 256:
        raise DimensionError("block has more cells than a SHA-256 digest has bits")
    sig = bytes(signature)
    label = hash_int(1, sig) % num_classes
    bits = hash_int(2, sig) % (1 << (n * n))
    # a block that spans the whole axis has only one legal offset
    row = hash_int(3, sig) % (height - n) if height > n else 0
    col = hash_int(4, sig) % (width - n) if width > n else 0
    pattern = FilterPattern(height, width, n, (row, col), bits)
    return WatermarkSpec(pattern, label, float(extreme_value))


def random_credential(rng: random.Random | None = None) -> OwnershipCredential:
    """Fresh keys and a random owner id; used for false-positive trials."""
    rng = rng or random.Random()
    keys = generate_keys(rng.getrandbits(63))
    return make_credential(keys, f"owner-{rng.getrandbits(48):012x}", "2020-01-01T00:00:00Z")
