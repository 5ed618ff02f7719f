"""Straight-line evaluation of the X3DH + ratchet-init formula chain.

Independent of ``prekeysim.crypto``: HKDF is written out by hand over the
stdlib ``hmac`` module and DH goes straight to ``cryptography``. Run as a
script to print the frozen vectors used in ``tests/test_crypto.py``.
"""
import hashlib
import hmac

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

IK_A_SEED = bytes(range(1, 33))
IK_B_SEED = bytes(range(33, 65))
SPK_B = bytes([0x42] * 32)
OTPK_B = bytes([0x17] * 32)
EK_A = bytes([0x5A] * 32)
RCHK_A = bytes([0xA5] * 32)

P = 2**255 - 19


def hkdf(salt, ikm, info, length):
    prk = hmac.new(salt, ikm, hashlib.sha256).digest()
    out, block, i = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        out += block
        i += 1
    return out[:length]


def x_pub(secret):
    return X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes_raw()


def dh(secret, public):
    return X25519PrivateKey.from_private_bytes(secret).exchange(X25519PublicKey.from_public_bytes(public))


def identity_dh_secret(seed):
    return hashlib.sha512(seed).digest()[:32]


def ed_to_montgomery(ed_pub):
    y = int.from_bytes(ed_pub, "little") & ((1 << 255) - 1)
    u = (1 + y) * pow(1 - y, P - 2, P) % P
    return u.to_bytes(32, "little")


def chain(with_otpk):
    ipk_b_ed = Ed25519PrivateKey.from_private_bytes(IK_B_SEED).public_key().public_bytes_raw()
    ipk_b = ed_to_montgomery(ipk_b_ed)
    prepk_b = x_pub(SPK_B)
    eprepk_b = x_pub(OTPK_B)
    ik_a = identity_dh_secret(IK_A_SEED)

    dh1 = dh(ik_a, prepk_b)
    dh2 = dh(EK_A, ipk_b)
    dh3 = dh(EK_A, prepk_b)
    material = dh1 + dh2 + dh3
    if with_otpk:
        material += dh(EK_A, eprepk_b)
    rk0 = hkdf(b"\x00" * 32, material, b"prekeysim-x3dh-root", 32)
    dh_ratchet = dh(RCHK_A, prepk_b)
    okm = hkdf(rk0, dh_ratchet, b"prekeysim-ratchet", 64)
    rk1, ck00 = okm[:32], okm[32:]
    mk00 = hmac.new(ck00, b"\x01", hashlib.sha256).digest()
    ck01 = hmac.new(ck00, b"\x02", hashlib.sha256).digest()
    mk01 = hmac.new(ck01, b"\x01", hashlib.sha256).digest()
    return {"rk0": rk0.hex(), "rk1": rk1.hex(), "ck00": ck00.hex(), "mk00": mk00.hex(), "mk01": mk01.hex()}


if __name__ == "__main__":
    for variant in (True, False):
        print("with_otpk" if variant else "without_otpk", chain(variant))
