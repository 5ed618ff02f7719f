"""X3DH handshake, double-ratchet key schedule and the key-compromise oracle.

DH runs over X25519 and identity keys sign with Ed25519; an identity key pair
is a single 32-byte seed used for both (the DH scalar is the Ed25519-expanded
secret, the DH public is the Montgomery form of the Ed25519 public).

Derivations:

* root init:  ``rk0 = HKDF(salt=0^32, ikm=dh1||dh2||dh3[||dh4], info=INFO_ROOT)``
* ``KDF_r(rk, dh) -> (rk', ck)``: ``HKDF(salt=rk, ikm=dh, info=INFO_RATCHET, 64)``
* ``KDF_m(ck) -> (ck', mk)``: ``mk = HMAC(ck, 0x01)``, ``ck' = HMAC(ck, 0x02)``
* message encryption: AES-256-CBC (PKCS7, random IV) then HMAC-SHA256 over
  ``AD || iv || ciphertext``; cipher and MAC keys come from
  ``HKDF(salt=0^32, ikm=mk, info=INFO_MESSAGE, 64)``.
"""
from __future__ import annotations

import hashlib
import hmac
import os
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, padding
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

INFO_ROOT = b"prekeysim-x3dh-root"
INFO_RATCHET = b"prekeysim-ratchet"
INFO_MESSAGE = b"prekeysim-message-keys"
ZERO_SALT = b"\x00" * 32

KEY_LEN = 32
SIG_LEN = 64
MAC_LEN = 32
IV_LEN = 16

_P25519 = 2**255 - 19


class CryptoError(Exception):
    pass


class HandshakeRejected(CryptoError):
    """The bundle's signed prekey does not verify under its identity key."""


class BundleParseError(CryptoError):
    pass


class StaleBundleError(CryptoError):
    """The envelope names a signed prekey the responder no longer holds."""


class AuthenticationError(CryptoError):
    pass


class ErasedSecretError(CryptoError):
    pass


class KeyRole(Enum):
    IDENTITY = "identity"
    SIGNED_PREKEY = "signed-prekey"
    ONE_TIME_PREKEY = "one-time-prekey"
    EPHEMERAL = "ephemeral"
    RATCHET = "ratchet"


class Direction(Enum):
    I_TO_R = "i->r"
    R_TO_I = "r->i"


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def _random_bytes(rng: random.Random | None, n: int) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.randbytes(n)


def x25519_public(secret: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()


def dh(secret: bytes, public: bytes) -> bytes:
    try:
        peer = X25519PublicKey.from_public_bytes(public)
    except ValueError as exc:
        raise BundleParseError(f"malformed public key: {exc}") from None
    return X25519PrivateKey.from_private_bytes(secret).exchange(peer)


def edwards_to_montgomery(ed_public: bytes) -> bytes:
    """Map an Ed25519 public key to the X25519 u-coordinate, u = (1+y)/(1-y)."""
    if len(ed_public) != KEY_LEN:
        raise BundleParseError("identity key must be 32 bytes")
    y = int.from_bytes(ed_public, "little") & ((1 << 255) - 1)
    denom = (1 - y) % _P25519
    if denom == 0:
        raise BundleParseError("identity key maps to the point at infinity")
    u = (1 + y) * pow(denom, _P25519 - 2, _P25519) % _P25519
    return u.to_bytes(32, "little")


def hkdf(salt: bytes, ikm: bytes, info: bytes, length: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    return hmac.new(key, data, hashlib.sha256).digest()


def kdf_root_init(material: bytes) -> bytes:
    return hkdf(ZERO_SALT, material, INFO_ROOT, KEY_LEN)


def kdf_r(root_key: bytes, dh_out: bytes) -> tuple[bytes, bytes]:
    okm = hkdf(root_key, dh_out, INFO_RATCHET, 2 * KEY_LEN)
    return okm[:KEY_LEN], okm[KEY_LEN:]


def kdf_m(chain_key: bytes) -> tuple[bytes, bytes]:
    """Return ``(next_chain_key, message_key)``."""
    return hmac_sha256(chain_key, b"\x02"), hmac_sha256(chain_key, b"\x01")


def _message_subkeys(mk: bytes) -> tuple[bytes, bytes]:
    okm = hkdf(ZERO_SALT, mk, INFO_MESSAGE, 2 * KEY_LEN)
    return okm[:KEY_LEN], okm[KEY_LEN:]


def aead_encrypt(mk: bytes, plaintext: bytes, ad: bytes, iv: bytes) -> tuple[bytes, bytes]:
    enc_key, mac_key = _message_subkeys(mk)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    encryptor = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).encryptor()
    ct = encryptor.update(padded) + encryptor.finalize()
    tag = hmac_sha256(mac_key, ad + iv + ct)
    return ct, tag


def aead_decrypt(mk: bytes, ct: bytes, tag: bytes, ad: bytes, iv: bytes) -> bytes:
    enc_key, mac_key = _message_subkeys(mk)
    if not hmac.compare_digest(hmac_sha256(mac_key, ad + iv + ct), tag):
        raise AuthenticationError("message authentication failed")
    decryptor = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).decryptor()
    padded = decryptor.update(ct) + decryptor.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    return unpadder.update(padded) + unpadder.finalize()


# --------------------------------------------------------------------------
# key pairs
# --------------------------------------------------------------------------

@dataclass(eq=False)
class DhKeyPair:
    secret: bytes
    public: bytes
    erased: bool = False
    _private: X25519PrivateKey | None = field(default=None, init=False, repr=False)

    role = KeyRole.EPHEMERAL

    def dh(self, peer_public: bytes) -> bytes:
        if self.erased:
            raise ErasedSecretError(f"{self.role.value} secret was erased")
        if self._private is None:
            self._private = X25519PrivateKey.from_private_bytes(self.secret)
        try:
            peer = X25519PublicKey.from_public_bytes(peer_public)
        except ValueError as exc:
            raise BundleParseError(f"malformed public key: {exc}") from None
        return self._private.exchange(peer)

    def erase(self) -> None:
        self.secret = b"\x00" * KEY_LEN
        self._private = None
        self.erased = True


@dataclass(eq=False)
class IdentityKeyPair(DhKeyPair):
    """``public`` is the Ed25519 verification key; ``dh_public`` its X25519 form."""

    seed: bytes = b""
    dh_public: bytes = b""

    role = KeyRole.IDENTITY

    @classmethod
    def from_seed(cls, seed: bytes) -> "IdentityKeyPair":
        signer = Ed25519PrivateKey.from_private_bytes(seed)
        secret = hashlib.sha512(seed).digest()[:32]
        return cls(
            secret=secret,
            public=signer.public_key().public_bytes_raw(),
            seed=seed,
            dh_public=x25519_public(secret),
        )

    def sign(self, message: bytes) -> bytes:
        if self.erased:
            raise ErasedSecretError("identity secret was erased")
        return Ed25519PrivateKey.from_private_bytes(self.seed).sign(message)

    def erase(self) -> None:
        super().erase()
        self.seed = b"\x00" * KEY_LEN


@dataclass(eq=False)
class SignedPrekeyPair(DhKeyPair):
    key_id: int = 0
    signature: bytes = b""

    role = KeyRole.SIGNED_PREKEY


@dataclass(eq=False)
class OneTimePrekeyPair(DhKeyPair):
    key_id: int = 0

    role = KeyRole.ONE_TIME_PREKEY


@dataclass(eq=False)
class EphemeralKeyPair(DhKeyPair):
    role = KeyRole.EPHEMERAL


@dataclass(eq=False)
class RatchetKeyPair(DhKeyPair):
    role = KeyRole.RATCHET


_ROLE_TYPES = {
    KeyRole.SIGNED_PREKEY: SignedPrekeyPair,
    KeyRole.ONE_TIME_PREKEY: OneTimePrekeyPair,
    KeyRole.EPHEMERAL: EphemeralKeyPair,
    KeyRole.RATCHET: RatchetKeyPair,
}


def generate_keypair(role: KeyRole, rng: random.Random | None = None, *, key_id: int = 0) -> DhKeyPair:
    """Fresh key pair for ``role``; with a seeded ``rng`` the output is reproducible.

    Signed prekeys come out unsigned here; use :func:`generate_signed_prekey`.
    """
    if key_id < 0:
        raise ValueError("key ids are non-negative")
    seed = _random_bytes(rng, KEY_LEN)
    if role is KeyRole.IDENTITY:
        return IdentityKeyPair.from_seed(seed)
    cls = _ROLE_TYPES[role]
    kwargs = {"key_id": key_id} if role in (KeyRole.SIGNED_PREKEY, KeyRole.ONE_TIME_PREKEY) else {}
    return _pair_from_secret(cls, seed, **kwargs)


def _pair_from_secret(cls: type, secret: bytes, **kwargs) -> DhKeyPair:
    private = X25519PrivateKey.from_private_bytes(secret)
    pair = cls(secret=secret, public=private.public_key().public_bytes_raw(), **kwargs)
    pair._private = private
    return pair


def one_time_prekey_from_secret(secret: bytes, key_id: int) -> OneTimePrekeyPair:
    return _pair_from_secret(OneTimePrekeyPair, secret, key_id=key_id)


def sign_prekey(identity: IdentityKeyPair, prekey_public: bytes) -> bytes:
    return identity.sign(prekey_public)


def verify_prekey(identity_public: bytes, prekey_public: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(identity_public).verify(signature, prekey_public)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def generate_signed_prekey(identity: IdentityKeyPair, key_id: int, rng: random.Random | None = None) -> SignedPrekeyPair:
    pair = generate_keypair(KeyRole.SIGNED_PREKEY, rng, key_id=key_id)
    pair.signature = sign_prekey(identity, pair.public)
    return pair


# --------------------------------------------------------------------------
# wire format
# --------------------------------------------------------------------------

def _lp(chunks: Iterable[bytes]) -> bytes:
    return b"".join(struct.pack(">I", len(c)) + c for c in chunks)


def _unlp(data: bytes) -> list[bytes]:
    out, pos = [], 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise BundleParseError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise BundleParseError("truncated field")
        out.append(data[pos:pos + n])
        pos += n
    return out


def _int_field(value: int | None) -> bytes:
    return b"" if value is None else struct.pack(">Q", value)


def _field_int(raw: bytes) -> int | None:
    if not raw:
        return None
    if len(raw) != 8:
        raise BundleParseError("integer field must be 8 bytes")
    return struct.unpack(">Q", raw)[0]


@dataclass(frozen=True)
class PrekeyHeader:
    """Handshake fields carried in clear on every initiator message until a reply arrives."""

    ephemeral_public: bytes
    signed_prekey_id: int
    one_time_prekey_id: int | None


@dataclass(frozen=True)
class Envelope:
    sender_identity: bytes
    receiver_identity: bytes
    ratchet_public: bytes
    ratchet_index: int
    counter: int
    previous_counter: int
    prekey: PrekeyHeader | None
    iv: bytes
    ciphertext: bytes
    mac: bytes

    @property
    def is_initial(self) -> bool:
        return self.prekey is not None

    def associated_data(self) -> bytes:
        pk = self.prekey
        return _lp([
            self.ratchet_public,
            pk.ephemeral_public if pk else b"",
            _int_field(pk.signed_prekey_id) if pk else b"",
            _int_field(pk.one_time_prekey_id) if pk else b"",
            self.sender_identity,
            self.receiver_identity,
            _int_field(self.ratchet_index),
            _int_field(self.counter),
            _int_field(self.previous_counter),
        ])

    def to_bytes(self) -> bytes:
        pk = self.prekey
        return _lp([
            self.sender_identity,
            self.receiver_identity,
            self.ratchet_public,
            _int_field(self.ratchet_index),
            _int_field(self.counter),
            _int_field(self.previous_counter),
            b"\x01" if pk else b"\x00",
            pk.ephemeral_public if pk else b"",
            _int_field(pk.signed_prekey_id) if pk else b"",
            _int_field(pk.one_time_prekey_id) if pk else b"",
            self.iv,
            self.ciphertext,
            self.mac,
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        f = _unlp(data)
        if len(f) != 13:
            raise BundleParseError(f"envelope has {len(f)} fields, expected 13")
        prekey = None
        if f[6] == b"\x01":
            spk_id = _field_int(f[8])
            if spk_id is None:
                raise BundleParseError("initial envelope without signed prekey id")
            prekey = PrekeyHeader(f[7], spk_id, _field_int(f[9]))
        return cls(
            sender_identity=f[0],
            receiver_identity=f[1],
            ratchet_public=f[2],
            ratchet_index=_field_int(f[3]) or 0,
            counter=_field_int(f[4]) or 0,
            previous_counter=_field_int(f[5]) or 0,
            prekey=prekey,
            iv=f[10],
            ciphertext=f[11],
            mac=f[12],
        )


# --------------------------------------------------------------------------
# sessions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MessageKey:
    key: bytes
    ratchet_index: int
    counter: int
    direction: Direction


@dataclass
class ChainState:
    key: bytes
    ratchet_index: int
    direction: Direction
    counter: int = 0

    def step(self) -> MessageKey:
        self.key, mk = kdf_m(self.key)
        out = MessageKey(mk, self.ratchet_index, self.counter, self.direction)
        self.counter += 1
        return out


@dataclass(eq=False)
class SessionState:
    is_initiator: bool
    local_identity: bytes
    remote_identity: bytes
    root_key: bytes
    local_ratchet: RatchetKeyPair | None
    remote_ratchet: bytes | None
    send_chain: ChainState | None
    recv_chain: ChainState | None
    ratchet_index: int = 0
    used_one_time_prekey_id: int | None = None
    pending_prekey: PrekeyHeader | None = None
    fs_restored: bool = False
    handshake_dh_count: int = 0
    previous_counter: int = 0
    skipped: dict[tuple[bytes, int], MessageKey] = field(default_factory=dict)
    emitted_keys: list[MessageKey] = field(default_factory=list)

    @property
    def direction_out(self) -> Direction:
        return Direction.I_TO_R if self.is_initiator else Direction.R_TO_I

    @property
    def direction_in(self) -> Direction:
        return Direction.R_TO_I if self.is_initiator else Direction.I_TO_R


MAX_SKIP = 1000


def _check_role(pair: object, cls: type, what: str) -> None:
    if not isinstance(pair, cls):
        raise TypeError(f"{what} must be a {cls.__name__}, got {type(pair).__name__}")


def x3dh_initiate(
    ik_a: IdentityKeyPair,
    bundle,
    rng: random.Random | None = None,
) -> SessionState:
    """Run the initiator side against a fetched bundle.

    ``bundle`` needs ``identity``, ``signed_prekey_id``, ``signed_prekey``,
    ``signed_prekey_signature`` and ``one_time_prekey`` (``(id, public)`` or
    ``None``); the server's ``PrekeyBundle`` provides these.
    """
    _check_role(ik_a, IdentityKeyPair, "initiator identity")
    try:
        ipk_b = bytes(bundle.identity)
        spk_id = int(bundle.signed_prekey_id)
        prepk_b = bytes(bundle.signed_prekey)
        sig = bytes(bundle.signed_prekey_signature)
        otpk = bundle.one_time_prekey
    except (AttributeError, TypeError, ValueError) as exc:
        raise BundleParseError(f"malformed bundle: {exc}") from None
    if len(ipk_b) != KEY_LEN or len(prepk_b) != KEY_LEN:
        raise BundleParseError("bundle keys must be 32 bytes")
    if not verify_prekey(ipk_b, prepk_b, sig):
        raise HandshakeRejected("signed prekey signature does not verify")

    ipk_b_dh = edwards_to_montgomery(ipk_b)
    ek_a = generate_keypair(KeyRole.EPHEMERAL, rng)
    rchk_a = generate_keypair(KeyRole.RATCHET, rng)

    material = ik_a.dh(prepk_b) + ek_a.dh(ipk_b_dh) + ek_a.dh(prepk_b)
    dh_count = 3
    otpk_id = None
    if otpk is not None:
        otpk_id, otpk_public = otpk
        material += ek_a.dh(bytes(otpk_public))
        dh_count += 1
    rk0 = kdf_root_init(material)
    rk1, ck00 = kdf_r(rk0, rchk_a.dh(prepk_b))
    ek_a.erase()

    return SessionState(
        is_initiator=True,
        local_identity=ik_a.public,
        remote_identity=ipk_b,
        root_key=rk1,
        local_ratchet=rchk_a,
        remote_ratchet=prepk_b,
        send_chain=ChainState(ck00, 0, Direction.I_TO_R),
        recv_chain=None,
        used_one_time_prekey_id=otpk_id,
        pending_prekey=PrekeyHeader(ek_a.public, spk_id, otpk_id),
        handshake_dh_count=dh_count,
    )


def _seal(session: SessionState, mk: MessageKey, plaintext: bytes, rng: random.Random | None) -> Envelope:
    iv = _random_bytes(rng, IV_LEN)
    draft = Envelope(
        sender_identity=session.local_identity,
        receiver_identity=session.remote_identity,
        ratchet_public=session.local_ratchet.public,
        ratchet_index=mk.ratchet_index,
        counter=mk.counter,
        previous_counter=session.previous_counter,
        prekey=session.pending_prekey,
        iv=iv,
        ciphertext=b"",
        mac=b"",
    )
    ct, tag = aead_encrypt(mk.key, plaintext, draft.associated_data(), iv)
    return Envelope(**{**draft.__dict__, "ciphertext": ct, "mac": tag})


def symmetric_ratchet_send(session: SessionState) -> MessageKey:
    if session.send_chain is None:
        raise CryptoError("sending chain not initialised")
    mk = session.send_chain.step()
    session.emitted_keys.append(mk)
    return mk


def asymmetric_ratchet_respond(session: SessionState, rng: random.Random | None = None) -> SessionState:
    """Fresh local ratchet pair and a new sending chain off the current root.

    The superseded local ratchet secret is erased; from then on the session
    no longer depends on secrets an attacker could later compromise.
    """
    if session.remote_ratchet is None:
        raise CryptoError("no remote ratchet key yet")
    new_pair = generate_keypair(KeyRole.RATCHET, rng)
    session.root_key, ck = kdf_r(session.root_key, new_pair.dh(session.remote_ratchet))
    session.ratchet_index += 1
    old = session.local_ratchet
    if session.send_chain is not None:
        session.previous_counter = session.send_chain.counter
    session.send_chain = ChainState(ck, session.ratchet_index, session.direction_out)
    session.local_ratchet = new_pair
    if old is not None:
        old.erase()
    session.fs_restored = True
    return session


def encrypt_next(session: SessionState, plaintext: bytes, rng: random.Random | None = None) -> Envelope:
    if session.send_chain is None:
        asymmetric_ratchet_respond(session, rng)
    return _seal(session, symmetric_ratchet_send(session), plaintext, rng)


def _open(mk: MessageKey, envelope: Envelope) -> bytes:
    return aead_decrypt(mk.key, envelope.ciphertext, envelope.mac, envelope.associated_data(), envelope.iv)


def x3dh_respond(
    ik_b: IdentityKeyPair,
    prek_b: SignedPrekeyPair,
    otpk_b: OneTimePrekeyPair | None,
    envelope: Envelope,
    ipk_a: bytes,
) -> tuple[SessionState, bytes]:
    _check_role(ik_b, IdentityKeyPair, "responder identity")
    _check_role(prek_b, SignedPrekeyPair, "signed prekey")
    header = envelope.prekey
    if header is None:
        raise BundleParseError("not an initial envelope")
    if prek_b.erased or header.signed_prekey_id != prek_b.key_id:
        raise StaleBundleError(f"signed prekey {header.signed_prekey_id} no longer held")
    if header.one_time_prekey_id is not None:
        if otpk_b is None or otpk_b.erased or otpk_b.key_id != header.one_time_prekey_id:
            raise StaleBundleError(f"one-time prekey {header.one_time_prekey_id} not held")
        _check_role(otpk_b, OneTimePrekeyPair, "one-time prekey")
    if envelope.sender_identity != ipk_a:
        raise AuthenticationError("sender identity mismatch")

    ipk_a_dh = edwards_to_montgomery(ipk_a)
    material = prek_b.dh(ipk_a_dh) + ik_b.dh(header.ephemeral_public) + prek_b.dh(header.ephemeral_public)
    dh_count = 3
    if header.one_time_prekey_id is not None:
        material += otpk_b.dh(header.ephemeral_public)
        dh_count += 1
    rk0 = kdf_root_init(material)
    rk1, ck00 = kdf_r(rk0, prek_b.dh(envelope.ratchet_public))

    session = SessionState(
        is_initiator=False,
        local_identity=ik_b.public,
        remote_identity=ipk_a,
        root_key=rk1,
        local_ratchet=None,
        remote_ratchet=envelope.ratchet_public,
        send_chain=None,
        recv_chain=ChainState(ck00, 0, Direction.I_TO_R),
        used_one_time_prekey_id=header.one_time_prekey_id,
        handshake_dh_count=dh_count,
    )
    plaintext = decrypt(session, envelope)
    return session, plaintext


def _skip_to(session: SessionState, until: int) -> None:
    chain = session.recv_chain
    if until - chain.counter > MAX_SKIP:
        raise CryptoError("too many skipped messages")
    while chain.counter < until:
        mk = chain.step()
        session.skipped[(session.remote_ratchet, mk.counter)] = mk


def decrypt(session: SessionState, envelope: Envelope) -> bytes:
    """Decrypt an in-session envelope, running a DH ratchet step on a new remote key.

    State is only committed once authentication succeeds.
    """
    slot = (envelope.ratchet_public, envelope.counter)
    if slot in session.skipped:
        plaintext = _open(session.skipped[slot], envelope)
        del session.skipped[slot]
        return plaintext

    snapshot = (session.root_key, session.remote_ratchet, session.recv_chain, session.ratchet_index,
                dict(session.skipped), session.send_chain, session.pending_prekey)
    recv = session.recv_chain
    if envelope.ratchet_public != session.remote_ratchet or recv is None:
        if recv is not None:
            session.recv_chain = ChainState(recv.key, recv.ratchet_index, recv.direction, recv.counter)
            _skip_to(session, envelope.previous_counter)
        if session.local_ratchet is None:
            raise CryptoError("no local ratchet key to answer a DH ratchet step")
        session.root_key, ck = kdf_r(session.root_key, session.local_ratchet.dh(envelope.ratchet_public))
        session.remote_ratchet = envelope.ratchet_public
        session.ratchet_index = envelope.ratchet_index
        session.recv_chain = ChainState(ck, envelope.ratchet_index, session.direction_in)
        session.send_chain = None
        session.pending_prekey = None
    else:
        session.recv_chain = ChainState(recv.key, recv.ratchet_index, recv.direction, recv.counter)
    try:
        _skip_to(session, envelope.counter)
        mk = session.recv_chain.step()
        plaintext = _open(mk, envelope)
    except Exception:
        (session.root_key, session.remote_ratchet, session.recv_chain, session.ratchet_index,
         session.skipped, session.send_chain, session.pending_prekey) = snapshot
        raise
    return plaintext


# --------------------------------------------------------------------------
# compromise oracle
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleResult:
    index: int
    plaintext: bytes | None

    @property
    def decrypted(self) -> bool:
        return self.plaintext is not None


def compromise_oracle(
    recorded: Sequence[Envelope],
    ik_b: IdentityKeyPair,
    prek_b: SignedPrekeyPair | Sequence[SignedPrekeyPair],
) -> list[OracleResult]:
    """Try to decrypt recorded traffic with only Bob's identity and signed-prekey secrets.

    Every envelope gets a genuine decryption attempt with whatever the
    attacker can derive; nothing is inferred from header flags alone.
    """
    _check_role(ik_b, IdentityKeyPair, "compromised identity")
    prekeys = [prek_b] if isinstance(prek_b, DhKeyPair) else list(prek_b)
    for pk in prekeys:
        _check_role(pk, SignedPrekeyPair, "compromised signed prekey")
    for pair in (ik_b, *prekeys):
        if pair.erased:
            raise ErasedSecretError(f"{pair.role.value} secret was erased; nothing to compromise")
    by_id = {pk.key_id: pk for pk in prekeys}

    # root keys the attacker managed to recover, per (initiator identity, ratchet public)
    recovered_roots: dict[bytes, list[bytes]] = {}
    results = []
    for idx, env in enumerate(recorded):
        plaintext = None
        if env.receiver_identity == ik_b.public and env.prekey is not None:
            plaintext, root = _oracle_initial(env, ik_b, by_id.get(env.prekey.signed_prekey_id))
            if root is not None:
                recovered_roots.setdefault(env.sender_identity, []).append(root)
        elif env.sender_identity in recovered_roots or env.receiver_identity in recovered_roots:
            peer = env.sender_identity if env.sender_identity in recovered_roots else env.receiver_identity
            plaintext = _oracle_followup(env, recovered_roots[peer], [ik_b, *prekeys])
        results.append(OracleResult(idx, plaintext))
    return results


def _oracle_initial(env: Envelope, ik_b: IdentityKeyPair, prek: SignedPrekeyPair | None):
    if prek is None:
        return None, None
    header = env.prekey
    try:
        material = (prek.dh(edwards_to_montgomery(env.sender_identity))
                    + ik_b.dh(header.ephemeral_public)
                    + prek.dh(header.ephemeral_public))
        rk0 = kdf_root_init(material)
        rk1, ck = kdf_r(rk0, prek.dh(env.ratchet_public))
    except CryptoError:
        return None, None
    for _ in range(env.counter):
        ck, _mk = kdf_m(ck)
    _, mk = kdf_m(ck)
    try:
        return aead_decrypt(mk, env.ciphertext, env.mac, env.associated_data(), env.iv), rk1
    except (AuthenticationError, ValueError):
        return None, None


def _oracle_followup(env: Envelope, roots: list[bytes], statics: list[DhKeyPair]) -> bytes | None:
    if env.counter > MAX_SKIP:
        return None
    for root in roots:
        for static in statics:
            try:
                _, ck = kdf_r(root, static.dh(env.ratchet_public))
            except CryptoError:
                continue
            for _ in range(env.counter):
                ck, _mk = kdf_m(ck)
            _, mk = kdf_m(ck)
            try:
                return aead_decrypt(mk, env.ciphertext, env.mac, env.associated_data(), env.iv)
            except (AuthenticationError, ValueError):
                continue
    return None
