"""Serialization helpers shared across the wire and file formats."""

from __future__ import annotations

import base64


def b64u_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64u_decode(text: str) -> bytes:
    if not isinstance(text, str):
        raise ValueError("base64url value must be a string")
    pad = -len(text) % 4
    try:
        return base64.urlsafe_b64decode(text + "=" * pad)
    except (ValueError, base64.binascii.Error) as exc:
        raise ValueError(f"invalid base64url: {text!r}") from exc
