"""Known-answer vectors: published GCM cases plus outputs of this package's own encodings.

``dump()`` recomputes everything with the current code, so a diff against a
saved dump shows any change in wire or key-derivation behaviour.
"""
from __future__ import annotations

from . import crypto
from .keyring import Status, leaf_hash, merkle_root
from .wire import REPORT_AAD, Report, ReportPlain

# AES-128-GCM test cases 1-4 from McGrew and Viega's GCM specification.
_K3 = "feffe9928665731c6d6a8f9467308308"
_P3 = (
    "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
    "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255"
)
_C3 = (
    "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e"
    "21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091473f5985"
)
GCM_CASES = (
    dict(name="gcm-1", key="00" * 16, iv="00" * 12, pt="", aad="", ct="", tag="58e2fccefa7e3061367f1d57a4e7455a"),
    dict(
        name="gcm-2", key="00" * 16, iv="00" * 12, pt="00" * 16, aad="",
        ct="0388dace60b6a392f328c2b971b2fe78", tag="ab6e47d42cec13bdf53a67b21257bddf",
    ),
    dict(name="gcm-3", key=_K3, iv="cafebabefacedbaddecaf888", pt=_P3, aad="", ct=_C3, tag="4d5c2af327cd64a62cf35abd2ba6fab4"),
    dict(
        name="gcm-4", key=_K3, iv="cafebabefacedbaddecaf888", pt=_P3[:120],
        aad="feedfacedeadbeeffeedfacedeadbeefabaddad2", ct=_C3[:120], tag="5bc94fbc3221a5db94fae95ae7121a47",
    ),
)


def check_gcm_case(case: dict) -> dict:
    ct, tag = crypto.gcm_seal(
        bytes.fromhex(case["key"]), bytes.fromhex(case["iv"]), bytes.fromhex(case["pt"]), bytes.fromhex(case["aad"])
    )
    return {**case, "got_ct": ct.hex(), "got_tag": tag.hex(), "ok": (ct.hex(), tag.hex()) == (case["ct"], case["tag"])}


def dump() -> dict:
    shared = bytes(range(32))
    gw_to_cc = crypto.kdf_session(shared, b"gw->cc", b"\x00" * 4)
    cc_to_gw = crypto.kdf_session(shared, b"cc->gw", b"\x00" * 4)

    report_key = crypto.SymKey(bytes(range(16)), b"\x00\x00\x00\x07")
    plain = ReportPlain(meter_id=3, reading=1234, nonce=bytes(range(16, 32)), ctr=1)
    report = Report(3, crypto.ae_encrypt(report_key, plain.encode(), REPORT_AAD)).encode()

    leaves = [leaf_hash(m, Status.ACTIVE, bytes([m]) * 16) for m in (1, 2, 3)]
    return {
        "gcm": [check_gcm_case(c) for c in GCM_CASES],
        "kdf_session": {
            "shared_secret": shared.hex(),
            "gw->cc": gw_to_cc.material.hex(),
            "cc->gw": cc_to_gw.material.hex(),
        },
        "report": {
            "key": report_key.material.hex(),
            "iv_prefix": "00000007",
            "plaintext": plain.encode().hex(),
            "wire": report.hex(),
        },
        "keyring": {
            "init_keys": {str(m): (bytes([m]) * 16).hex() for m in (1, 2, 3)},
            "leaves": [h.hex() for h in leaves],
            "root": merkle_root(leaves).hex(),
        },
    }
