"""Somewhat homomorphic encryption of single bits over the integers.

A bit ``m`` is hidden as ``c = m' + p*q`` where ``p`` is the secret odd
modulus, ``q`` a random multiplier and ``m'`` a small noise term with the
parity of ``m``.  Sums and products of ciphertexts decrypt to XOR and AND of
the plaintext bits for as long as the accumulated noise ``c mod p`` stays
below ``p/2``.

The squashed form of decryption (``LSB(c) xor LSB(sum s_i z_i)``) is shallow
enough to be evaluated homomorphically over an encryption of the sparse
subset ``s``; :func:`recrypt` does exactly that to refresh a noisy
ciphertext.
"""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import (
    BootstrapUnavailable,
    KeyFormatError,
    NoiseOverflow,
    TruncatedPayload,
)

__all__ = [
    "SecurityParams",
    "SecretKey",
    "SquashHint",
    "PublicKey",
    "BootstrapKey",
    "Ciphertext",
    "keygen",
    "make_bootstrap_key",
    "encrypt_bit",
    "decrypt_bit",
    "decrypt_bit_squashed",
    "he_add",
    "he_mul",
    "trivial",
    "squash_postprocess",
    "compute_z",
    "recrypt",
    "recrypt_noise_bound",
    "noise_of",
    "centered_mod",
    "dump_key",
    "load_key",
    "serialize_ciphertext",
    "read_ciphertext",
    "parse_ciphertext",
]

KEY_MAGIC = "HEDB-KEY v1"

# Noise budget (in bits) that the database profile reserves for query
# circuits.  Covers select_nth over 16 rows with a 64-bit predicate column;
# see tests/test_circuits.py::test_noise_budget_deepest_select.
DATABASE_NOISE_BUDGET = 9000


def _rng(seed: int | random.Random | None) -> random.Random:
    if isinstance(seed, random.Random):
        return seed
    if seed is None:
        return random.SystemRandom()
    return random.Random(seed)


def _ceil_log2(x: int) -> int:
    return 0 if x <= 1 else (x - 1).bit_length()


@dataclass(frozen=True)
class SecurityParams:
    """Bit sizes of the scheme.

    ``n_bits``, ``q_bits`` follow N = lambda and Q = lambda**5.  ``p_bits``
    is at least lambda**2; larger values buy multiplicative depth, which
    is how the toy database profile avoids bootstrapping.
    """

    lam: int
    n_bits: int
    p_bits: int
    q_bits: int
    alpha: int
    beta: int
    frac_bits: int

    def __post_init__(self):
        if self.lam < 1:
            raise ValueError("lambda must be positive")
        if self.n_bits != self.lam:
            raise ValueError(f"n_bits must equal lambda ({self.lam}), got {self.n_bits}")
        if self.q_bits != self.lam**5:
            raise ValueError(f"q_bits must equal lambda**5 ({self.lam ** 5}), got {self.q_bits}")
        if self.p_bits < self.lam**2:
            raise ValueError(f"p_bits must be at least lambda**2 ({self.lam ** 2}), got {self.p_bits}")
        if not 1 <= self.alpha < self.beta:
            raise ValueError("need 1 <= alpha < beta")
        if self.frac_bits < _ceil_log2(self.alpha) + 3:
            raise ValueError("frac_bits must be >= ceil(log2(alpha)) + 3")

    @classmethod
    def from_lambda(cls, lam: int, p_bits: int | None = None) -> "SecurityParams":
        alpha = max(lam, 1)
        beta = 5 * alpha
        return cls(
            lam=lam,
            n_bits=lam,
            p_bits=lam**2 if p_bits is None else p_bits,
            q_bits=lam**5,
            alpha=alpha,
            beta=beta,
            frac_bits=_ceil_log2(alpha) + 3,
        )

    @classmethod
    def database(cls, lam: int = 2) -> "SecurityParams":
        """Profile deep enough for every query circuit on tables of <= 16 rows."""
        return cls.from_lambda(lam, p_bits=max(lam**2, DATABASE_NOISE_BUDGET + 2))

    @classmethod
    def bootstrappable(cls, lam: int, headroom: int = 2) -> "SecurityParams":
        """Smallest profile whose recrypt output still supports ``headroom`` more levels."""
        base = cls.from_lambda(lam)
        bound = recrypt_noise_bound(base)
        # one multiplication of two refreshed ciphertexts must stay decryptable
        need = headroom * bound + 2
        return cls.from_lambda(lam, p_bits=max(lam**2, need))

    @property
    def y_bits(self) -> int:
        """Fixed-point precision of the squash vector ``y``.

        Large enough that ``c * (sum y_i - 1/p)`` is negligible for any
        ciphertext reduced below ``2**(p_bits + q_bits + 1)``.
        """
        return self.p_bits + self.q_bits + self.frac_bits + _ceil_log2(self.beta) + 5

    @property
    def noise_limit(self) -> int:
        """Ciphertexts with ``noise_bits`` at or above this are not reliably decryptable."""
        return self.p_bits - 1


@dataclass(frozen=True)
class SecretKey:
    p: int
    params: SecurityParams
    s: tuple[int, ...] = ()

    def __post_init__(self):
        if self.p < 3 or self.p % 2 == 0:
            raise ValueError("secret modulus must be odd and >= 3")
        if self.p.bit_length() != self.params.p_bits:
            raise ValueError(
                f"secret modulus has {self.p.bit_length()} bits, expected {self.params.p_bits}"
            )
        if self.s and len(self.s) != self.params.beta:
            raise ValueError("sparse-subset vector must have beta entries")


@dataclass(frozen=True)
class SquashHint:
    y: tuple[int, ...]
    s: tuple[int, ...]
    y_bits: int

    def check(self, p: int, alpha: int, frac_bits: int) -> None:
        if sum(self.s) != alpha:
            raise ValueError("sparse subset must have hamming weight alpha")
        one = 1 << self.y_bits
        total = sum(y for y, si in zip(self.y, self.s) if si) % (2 * one)
        target = _inverse_fixed(p, self.y_bits)
        diff = abs(total - target)
        diff = min(diff, 2 * one - diff)
        # |sum - 1/p| < 2**(1 - frac_bits), measured in units of 2**-y_bits
        if diff * (1 << (frac_bits - 1)) >= one:
            raise ValueError("subset sum of y is not close enough to 1/p")


def _inverse_fixed(p: int, bits: int) -> int:
    """``1/p`` as a fixed-point integer with ``bits`` fractional bits, rounded."""
    return ((1 << (bits + 1)) + p) // (2 * p)


@dataclass(frozen=True)
class PublicKey:
    """Public material: reduction modulus, encryptions of zero and the squash vector.

    ``x0`` is an exact multiple of ``p`` (a noise-free encryption of zero)
    used to keep ciphertext integers below ``2**(p_bits + q_bits)``.
    """

    params: SecurityParams
    x0: int
    zero_encs: tuple[int, ...] = ()
    y: tuple[int, ...] = ()


@dataclass(frozen=True)
class BootstrapKey:
    enc_s: tuple["Ciphertext", ...]


@dataclass(frozen=True, slots=True)
class Ciphertext:
    """One encrypted bit.

    ``noise_bits`` is a conservative bound on the bit length of ``c mod p``.
    ``z`` holds the squash post-processing as integers scaled by
    ``2**frac_bits`` (each value lies in ``[0, 2)``).
    """

    c: int
    noise_bits: int
    z: tuple[int, ...] | None = field(default=None, compare=True)


def trivial(bit: int) -> Ciphertext:
    """A plaintext constant injected into a circuit."""
    return Ciphertext(bit & 1, 1)


# --------------------------------------------------------------------- keys


def keygen(
    params: SecurityParams, seed: int | random.Random | None = None
) -> tuple[SecretKey, PublicKey, BootstrapKey]:
    if params.lam < 2:
        raise ValueError("lambda must be at least 2 (degenerate modulus)")
    rng = _rng(seed)
    P = params.p_bits
    # top two bits set: keeps |noise/p| < 1/3 whenever noise_bits <= P - 2,
    # which the squashed decryption needs for its rounding slack
    lo = 3 << (P - 2)
    p = rng.randrange(lo, 1 << P) | 1
    x0 = p * _random_bits(rng, params.q_bits)

    hint = _squash_hint(p, params, rng)
    sk = SecretKey(p=p, params=params, s=hint.s)
    zero_encs = tuple(
        encrypt_bit(0, sk, rng).c % x0 for _ in range(2 * params.beta)
    )
    pk = PublicKey(params=params, x0=x0, zero_encs=zero_encs, y=hint.y)
    bk = make_bootstrap_key(sk, rng)
    return sk, pk, bk


def make_bootstrap_key(sk: SecretKey, seed: int | random.Random | None = None) -> BootstrapKey:
    if not sk.s:
        raise BootstrapUnavailable("secret key carries no sparse subset")
    rng = _rng(seed)
    return BootstrapKey(tuple(encrypt_bit(si, sk, rng) for si in sk.s))


def _random_bits(rng: random.Random, bits: int) -> int:
    """Uniform integer with exactly ``bits`` bits (top bit set)."""
    if bits <= 1:
        return 1
    return rng.getrandbits(bits - 1) | (1 << (bits - 1))


def _squash_hint(p: int, params: SecurityParams, rng: random.Random) -> SquashHint:
    kappa = params.y_bits
    modulus = 1 << (kappa + 1)  # y values live in [0, 2)
    y = [rng.randrange(modulus) for _ in range(params.beta)]
    subset = sorted(rng.sample(range(params.beta), params.alpha))
    last = subset[-1]
    partial = sum(y[i] for i in subset[:-1])
    y[last] = (_inverse_fixed(p, kappa) - partial) % modulus
    s = tuple(1 if i in subset else 0 for i in range(params.beta))
    hint = SquashHint(tuple(y), s, kappa)
    hint.check(p, params.alpha, params.frac_bits)
    return hint


# --------------------------------------------------------- encrypt/decrypt


def encrypt_bit(
    m: int,
    key: SecretKey | PublicKey,
    seed: int | random.Random | None = None,
    *,
    m_prime: int | None = None,
    q: int | None = None,
) -> Ciphertext:
    """Encrypt one bit.

    With a :class:`SecretKey` this is ``c = m' + p*q`` exactly.  With a
    :class:`PublicKey` the ``p*q`` term is replaced by the sum of a uniformly
    random subset of the public encryptions of zero, reduced mod ``x0``.
    ``m_prime`` and ``q`` pin the randomness (symmetric mode only).
    """
    if m not in (0, 1):
        raise ValueError(f"plaintext must be a bit, got {m!r}")
    params = key.params
    rng = _rng(seed) if (m_prime is None or q is None) else None
    if m_prime is None:
        m_prime = _noise_term(m, params.n_bits, rng)
    elif m_prime % 2 != m:
        raise ValueError("m' must have the parity of m")

    if isinstance(key, SecretKey):
        if q is None:
            q = _random_bits(rng, params.q_bits)
        return Ciphertext(m_prime + key.p * q, max(m_prime.bit_length(), 1))

    if not key.zero_encs:
        raise ValueError("public key has no encryptions of zero")
    rng = rng or _rng(None)
    c = m_prime
    for x in key.zero_encs:
        if rng.getrandbits(1):
            c += x
    bound = (len(key.zero_encs) + 1) * ((1 << params.n_bits) - 1)
    return Ciphertext(c % key.x0, bound.bit_length())


def _noise_term(m: int, n_bits: int, rng: random.Random) -> int:
    # a random n_bits-bit number (top bit set) with the parity of m
    lo = 1 << (n_bits - 1) if n_bits > 1 else 0
    hi = (1 << n_bits) - 1
    v = rng.randint(lo, hi)
    if v % 2 != m:
        v = v + 1 if v < hi else v - 1
    return v


def centered_mod(c: int, p: int) -> int:
    """Residue of ``c`` modulo ``p`` in ``(-p/2, p/2]``."""
    r = c % p
    return r - p if 2 * r > p else r


def decrypt_bit(ct: Ciphertext, sk: SecretKey, *, strict: bool = True) -> int:
    if strict and ct.noise_bits >= sk.params.noise_limit:
        raise NoiseOverflow(
            f"ciphertext noise estimate {ct.noise_bits} bits exceeds the "
            f"{sk.params.noise_limit - 1}-bit budget; raise lambda/p_bits"
        )
    return centered_mod(ct.c, sk.p) & 1


def decrypt_bit_squashed(ct: Ciphertext, sk: SecretKey) -> int:
    """``LSB(c) xor LSB(round(sum s_i z_i))``."""
    if ct.z is None:
        raise ValueError("ciphertext has no squash post-processing")
    if not sk.s:
        raise BootstrapUnavailable("secret key carries no sparse subset")
    f = sk.params.frac_bits
    total = sum(zi for zi, si in zip(ct.z, sk.s) if si)
    rounded = (total + (1 << (f - 1))) >> f
    return (ct.c & 1) ^ (rounded & 1)


def noise_of(ct: Ciphertext, sk: SecretKey) -> int:
    """Bit length of the true noise ``c mod p`` (test/debug only)."""
    return abs(centered_mod(ct.c, sk.p)).bit_length()


# --------------------------------------------------------------- arithmetic


def compute_z(c: int, y: Sequence[int], params: SecurityParams) -> tuple[int, ...]:
    shift = params.y_bits - params.frac_bits
    mask = (1 << (params.frac_bits + 1)) - 1
    return tuple(((c * yi) >> shift) & mask for yi in y)


def squash_postprocess(ct: Ciphertext, pk: PublicKey) -> Ciphertext:
    """Attach ``z_i = c * y_i mod 2`` truncated to ``frac_bits`` fractional bits."""
    if not pk.y:
        raise BootstrapUnavailable("public key carries no squash vector")
    c = ct.c % pk.x0 if pk.x0 else ct.c
    return Ciphertext(c, ct.noise_bits, compute_z(c, pk.y, pk.params))


def _finish(c: int, noise_bits: int, pk: PublicKey | None, squash: bool) -> Ciphertext:
    if pk is not None and pk.x0:
        c %= pk.x0
    if squash and pk is not None and pk.y:
        return Ciphertext(c, noise_bits, compute_z(c, pk.y, pk.params))
    return Ciphertext(c, noise_bits)


def he_add(a: Ciphertext, b: Ciphertext, pk: PublicKey | None = None) -> Ciphertext:
    """Encrypts ``m_a xor m_b``."""
    squash = a.z is not None or b.z is not None
    return _finish(a.c + b.c, max(a.noise_bits, b.noise_bits) + 1, pk, squash)


def he_mul(a: Ciphertext, b: Ciphertext, pk: PublicKey | None = None) -> Ciphertext:
    """Encrypts ``m_a and m_b``; the noise bound is the sum of the operands'."""
    squash = a.z is not None or b.z is not None
    return _finish(a.c * b.c, a.noise_bits + b.noise_bits, pk, squash)


# --------------------------------------------------------------- bootstrap


def _squashed_decryption_circuit(
    c: int,
    z: Sequence[int],
    enc_s: Sequence[Ciphertext],
    params: SecurityParams,
    add,
    mul,
) -> Ciphertext:
    """Evaluate ``LSB(c) xor LSB(round(sum s_i z_i))`` over encrypted ``s``.

    The bits of ``c`` and ``z`` enter as trivial ciphertexts, so the gate
    structure (and therefore the noise bound of the output) depends on the
    parameters only.
    """
    f = params.frac_bits
    columns: list[list[Ciphertext]] = [[] for _ in range(f + 1)]
    for zi, si in zip(z, enc_s):
        for j in range(f + 1):
            columns[j].append(mul(si, trivial((zi >> j) & 1)))
    # rounding: add one half before taking the integer part
    columns[f - 1].append(trivial(1))

    for j in range(f):
        queue = columns[j]
        while len(queue) > 1:
            if len(queue) >= 3:
                a, b, cin = queue.pop(0), queue.pop(0), queue.pop(0)
                t = add(a, b)
                queue.append(add(t, cin))
                columns[j + 1].append(add(mul(a, b), mul(cin, t)))
            else:
                a, b = queue.pop(0), queue.pop(0)
                queue.append(add(a, b))
                columns[j + 1].append(mul(a, b))
    # only the parity of the top column matters; sum it as a balanced tree
    top = columns[f]
    while len(top) > 1:
        top = [add(top[i], top[i + 1]) if i + 1 < len(top) else top[i] for i in range(0, len(top), 2)]
    return add(trivial(c & 1), top[0])


def recrypt(
    ct: Ciphertext, bk: BootstrapKey | None, pk: PublicKey
) -> Ciphertext:
    """Refresh ``ct`` by homomorphically evaluating its squashed decryption."""
    if bk is None or not bk.enc_s:
        raise BootstrapUnavailable("recrypt needs a bootstrap key")
    if not pk.y:
        raise BootstrapUnavailable("recrypt needs the squash vector")
    params = pk.params
    if ct.noise_bits >= params.noise_limit:
        raise NoiseOverflow(
            f"cannot recrypt: noise estimate {ct.noise_bits} >= {params.noise_limit}"
        )
    c = ct.c % pk.x0
    z = ct.z if (ct.z is not None and c == ct.c) else compute_z(c, pk.y, params)
    out = _squashed_decryption_circuit(
        c, z, bk.enc_s, params,
        lambda a, b: he_add(a, b, pk),
        lambda a, b: he_mul(a, b, pk),
    )
    return Ciphertext(out.c, out.noise_bits)


def recrypt_noise_bound(params: SecurityParams) -> int:
    """Noise bound of every :func:`recrypt` output; a function of ``params`` alone."""
    fresh = Ciphertext(0, params.n_bits)
    out = _squashed_decryption_circuit(
        0, [0] * params.beta, [fresh] * params.beta, params,
        lambda a, b: Ciphertext(0, max(a.noise_bits, b.noise_bits) + 1),
        lambda a, b: Ciphertext(0, a.noise_bits + b.noise_bits),
    )
    return out.noise_bits


# ------------------------------------------------------------ serialization


def dump_key(sk: SecretKey, pk: PublicKey) -> str:
    params = sk.params
    lines = [
        KEY_MAGIC,
        str(params.lam),
        format(sk.p, "x"),
        f"{params.beta} {params.alpha} {params.frac_bits}",
    ]
    lines += [format(y, "x") for y in pk.y]
    s_int = sum(bit << i for i, bit in enumerate(sk.s))
    lines.append(format(s_int, "x"))
    encs = (pk.x0,) + pk.zero_encs
    lines.append(str(len(encs)))
    lines += [format(x, "x") for x in encs]
    return "\n".join(lines) + "\n"


def load_key(text: str) -> tuple[SecretKey, PublicKey]:
    lines = text.splitlines()
    try:
        if not lines or lines[0].strip() != KEY_MAGIC:
            raise KeyFormatError("not a HEDB key file (bad magic)")
        lam = int(lines[1])
        p = int(lines[2], 16)
        beta, alpha, frac_bits = (int(v) for v in lines[3].split())
        params = SecurityParams(
            lam=lam, n_bits=lam, p_bits=p.bit_length(), q_bits=lam**5,
            alpha=alpha, beta=beta, frac_bits=frac_bits,
        )
        y = tuple(int(v, 16) for v in lines[4 : 4 + beta])
        if len(y) != beta:
            raise KeyFormatError("truncated squash vector")
        s_int = int(lines[4 + beta], 16)
        s = tuple((s_int >> i) & 1 for i in range(beta))
        count = int(lines[5 + beta])
        encs = tuple(int(v, 16) for v in lines[6 + beta : 6 + beta + count])
        if len(encs) != count or count < 1:
            raise KeyFormatError("truncated zero-encryption list")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, KeyFormatError):
            raise
        raise KeyFormatError(f"malformed key file: {exc}") from exc
    sk = SecretKey(p=p, params=params, s=s)
    pk = PublicKey(params=params, x0=encs[0], zero_encs=encs[1:], y=y)
    return sk, pk


def serialize_ciphertext(ct: Ciphertext, frac_bits: int | None = None) -> bytes:
    """Flag byte, u32 noise bound, u32 length + big-endian magnitude, optional z block."""
    mag = ct.c.to_bytes((ct.c.bit_length() + 7) // 8, "big")
    out = [struct.pack(">BII", 1 if ct.z is not None else 0, ct.noise_bits, len(mag)), mag]
    if ct.z is not None:
        if frac_bits is None:
            raise ValueError("frac_bits is required to serialize a squashed ciphertext")
        width = (frac_bits + 1 + 7) // 8
        out.append(struct.pack(">HB", len(ct.z), frac_bits))
        out += [zi.to_bytes(width, "big") for zi in ct.z]
    return b"".join(out)


def read_ciphertext(buf: bytes | memoryview, offset: int = 0) -> tuple[Ciphertext, int]:
    """Parse one ciphertext at ``offset``; returns it and the next offset."""
    buf = memoryview(buf)
    if offset + 9 > len(buf):
        raise TruncatedPayload("ciphertext header truncated")
    flag, noise_bits, length = struct.unpack_from(">BII", buf, offset)
    offset += 9
    if flag not in (0, 1):
        raise TruncatedPayload(f"bad ciphertext flag byte {flag}")
    if offset + length > len(buf):
        raise TruncatedPayload("ciphertext magnitude truncated")
    c = int.from_bytes(buf[offset : offset + length], "big")
    offset += length
    z = None
    if flag:
        if offset + 3 > len(buf):
            raise TruncatedPayload("z header truncated")
        count, frac_bits = struct.unpack_from(">HB", buf, offset)
        offset += 3
        width = (frac_bits + 1 + 7) // 8
        if offset + count * width > len(buf):
            raise TruncatedPayload("z values truncated")
        z = tuple(
            int.from_bytes(buf[offset + k * width : offset + (k + 1) * width], "big")
            for k in range(count)
        )
        offset += count * width
    return Ciphertext(c, noise_bits, z), offset


def parse_ciphertext(data: bytes) -> Ciphertext:
    ct, end = read_ciphertext(data)
    if end != len(data):
        raise TruncatedPayload("trailing bytes after ciphertext")
    return ct


def serialize_many(cts: Iterable[Ciphertext], frac_bits: int | None = None) -> bytes:
    cts = list(cts)
    body = b"".join(serialize_ciphertext(ct, frac_bits) for ct in cts)
    return struct.pack(">I", len(cts)) + body


def read_many(buf: bytes | memoryview, offset: int = 0) -> tuple[list[Ciphertext], int]:
    buf = memoryview(buf)
    if offset + 4 > len(buf):
        raise TruncatedPayload("ciphertext count truncated")
    (count,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    out = []
    for _ in range(count):
        ct, offset = read_ciphertext(buf, offset)
        out.append(ct)
    return out, offset


def bits_needed(n: int) -> int:
    """Counter width ``ceil(log2(n + 1))``, at least 1."""
    return max(1, n.bit_length())
