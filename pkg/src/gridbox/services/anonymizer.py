"""Partial encryption of identifying fields in a mammogram DataSet.

PatientName is encrypted, PatientID becomes a keyed pseudonym (its encrypted
original goes to a private tag) and the birth date keeps its year, with the
full date encrypted into a private tag. Every other element is untouched.
"""

import base64
import binascii
import hashlib
import os
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from gridbox.errors import GridError
from gridbox.services import dicom_codec as codec
from gridbox.services.dicom_codec import DataElement, DataSet, TagKey

CIPHER_ID = "A256GCM"
ENCRYPTED_PREFIX = f"ENC:{CIPHER_ID}:"
PSEUDONYM_PREFIX = "PSN:"
NONCE_BYTES = 12


@dataclass(frozen=True)
class AnonymizationKey:
    cipher_key: bytes
    pseudonym_salt: bytes

    def __post_init__(self):
        if len(self.cipher_key) != 32:
            raise GridError("InvariantViolation", "cipher key must be 32 bytes")
        if len(self.pseudonym_salt) != 16:
            raise GridError("InvariantViolation", "pseudonym salt must be 16 bytes")

    def __repr__(self) -> str:
        return "AnonymizationKey(<redacted>)"

    @classmethod
    def derive(cls, master: bytes) -> "AnonymizationKey":
        """Split a site master secret into cipher key and pseudonym salt."""
        cipher_key = hashlib.sha256(b"cipher|" + master).digest()
        salt = hashlib.sha256(b"salt|" + master).digest()[:16]
        return cls(cipher_key, salt)


def pseudonym(patient_id: str, key: AnonymizationKey) -> str:
    digest = hashlib.sha256(key.pseudonym_salt + patient_id.encode("utf-8")).hexdigest()
    return PSEUDONYM_PREFIX + digest[:16]


def _encrypt(text: str, tag: TagKey, key: AnonymizationKey, nonce: bytes) -> str:
    sealed = AESGCM(key.cipher_key).encrypt(nonce, text.encode("utf-8"), str(tag).encode())
    return ENCRYPTED_PREFIX + base64.b64encode(nonce + sealed).decode("ascii")


def _decrypt(value: str, tag: TagKey, key: AnonymizationKey) -> str:
    if not value.startswith(ENCRYPTED_PREFIX):
        raise GridError("NotAnonymized", f"{tag} is not an encrypted field")
    try:
        raw = base64.b64decode(value[len(ENCRYPTED_PREFIX) :], validate=True)
    except (binascii.Error, ValueError) as exc:
        raise GridError("WrongKey", f"{tag} ciphertext is malformed") from exc
    nonce, sealed = raw[:NONCE_BYTES], raw[NONCE_BYTES:]
    try:
        plain = AESGCM(key.cipher_key).decrypt(nonce, sealed, str(tag).encode())
    except InvalidTag as exc:
        raise GridError("WrongKey", f"authentication failed for {tag}") from exc
    return plain.decode("utf-8")


def anonymize(
    ds: DataSet,
    key: AnonymizationKey,
    token_bytes: Callable[[int], bytes] = os.urandom,
) -> DataSet:
    report = codec.validate(ds)
    if not report.ok:
        raise GridError("InvariantViolation", report.summary())

    name = ds.value(codec.PATIENT_NAME)
    patient_id = ds.value(codec.PATIENT_ID)
    birth_date = ds.value(codec.BIRTH_DATE)
    if not isinstance(name, str) or not isinstance(patient_id, str):
        raise GridError("InvariantViolation", "patient name and id must be text")
    if not isinstance(birth_date, str):
        raise GridError("InvariantViolation", "birth date must be text")
    if name.startswith("ENC:"):
        raise GridError("InvariantViolation", "DataSet is already anonymized")

    encrypted_name = _encrypt(name, codec.PATIENT_NAME, key, token_bytes(NONCE_BYTES))
    result = ds.with_element(DataElement(codec.PATIENT_NAME, "PN", encrypted_name))
    result = result.with_element(DataElement(codec.PATIENT_ID, "LO", pseudonym(patient_id, key)))
    result = result.with_element(
        DataElement(
            codec.ENCRYPTED_PATIENT_ID,
            "LO",
            _encrypt(patient_id, codec.ENCRYPTED_PATIENT_ID, key, token_bytes(NONCE_BYTES)),
        )
    )
    result = result.with_element(DataElement(codec.BIRTH_DATE, "DA", birth_date[:4] + "0101"))
    result = result.with_element(
        DataElement(
            codec.ENCRYPTED_BIRTH_DATE,
            "LO",
            _encrypt(birth_date, codec.ENCRYPTED_BIRTH_DATE, key, token_bytes(NONCE_BYTES)),
        )
    )
    return result


def is_anonymized(ds: DataSet) -> bool:
    name = ds.value(codec.PATIENT_NAME)
    return isinstance(name, str) and name.startswith(ENCRYPTED_PREFIX)


def deanonymize(ds: DataSet, key: AnonymizationKey) -> DataSet:
    name = ds.value(codec.PATIENT_NAME)
    if not isinstance(name, str) or not name.startswith("ENC:"):
        raise GridError("NotAnonymized", "PatientName carries no ENC: prefix")

    encrypted_id = ds.value(codec.ENCRYPTED_PATIENT_ID)
    encrypted_date = ds.value(codec.ENCRYPTED_BIRTH_DATE)
    if not isinstance(encrypted_id, str) or not isinstance(encrypted_date, str):
        raise GridError("NotAnonymized", "private anonymization tags are missing")

    plain_name = _decrypt(name, codec.PATIENT_NAME, key)
    plain_id = _decrypt(encrypted_id, codec.ENCRYPTED_PATIENT_ID, key)
    plain_date = _decrypt(encrypted_date, codec.ENCRYPTED_BIRTH_DATE, key)

    result = ds.without(codec.ENCRYPTED_PATIENT_ID).without(codec.ENCRYPTED_BIRTH_DATE)
    result = result.with_element(DataElement(codec.PATIENT_NAME, "PN", plain_name))
    result = result.with_element(DataElement(codec.PATIENT_ID, "LO", plain_id))
    result = result.with_element(DataElement(codec.BIRTH_DATE, "DA", plain_date))
    return result
