"""HTTP chat-completions client (OpenAI-style wire format).

Images travel inline as base64 PNG data URLs. The endpoint, model, and
timeout come from BackendConfig; the API key is read from the environment
variable named in the config so secrets never land in config files. When
``audit_path`` is set, every request/response lands as one JSON line for
offline inspection.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import time
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .prompts import messages_text
from .schemas import BackendConfig, TransportFailure
from .scripted import Reply, _IMAGE_TOKENS


def _png_data_url(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def _wire_messages(messages: list[dict], detail: str) -> list[dict]:
    wire = []
    for msg in messages:
        parts = []
        for part in msg.get("content", []):
            if part.get("type") == "text":
                parts.append({"type": "text", "text": part["text"]})
            elif part.get("type") == "image":
                parts.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": _png_data_url(part["pixels"]), "detail": detail},
                    }
                )
        wire.append({"role": msg["role"], "content": parts})
    return wire


class RemoteChatBackend:
    def __init__(
        self,
        config: BackendConfig,
        session=None,
        audit_path: str | Path | None = None,
    ):
        if not config.endpoint:
            raise ValueError("remote backend requires an endpoint URL")
        self.config = config
        self._session = session if session is not None else requests.Session()
        self._audit_path = Path(audit_path) if audit_path else None

    def complete(self, role: str, key: str, messages: list[dict]) -> Reply:
        cfg = self.config
        body = {
            "model": cfg.model,
            "temperature": cfg.temperature,
            "messages": _wire_messages(messages, cfg.image_detail),
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        try:
            resp = self._session.post(
                cfg.endpoint, json=body, headers=headers, timeout=cfg.timeout
            )
        except requests.RequestException as exc:
            raise TransportFailure(f"{role} endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise TransportFailure(f"{role} endpoint returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportFailure(f"{role} endpoint returned a malformed body: {exc}") from exc
        usage = payload.get("usage") or {}
        prompt_text = messages_text(messages)
        n_images = sum(
            1 for m in messages for p in m.get("content", []) if p.get("type") == "image"
        )
        tokens_in = int(usage.get("prompt_tokens", len(prompt_text) // 4 + _IMAGE_TOKENS * n_images))
        tokens_out = int(usage.get("completion_tokens", len(text) // 4))
        self._audit(role, key, prompt_text, text, tokens_in, tokens_out)
        return Reply(text, tokens_in, tokens_out)

    def _audit(self, role, key, prompt_text, text, tokens_in, tokens_out):
        if self._audit_path is None:
            return
        record = {
            "time": time.time(),
            "role": role,
            "key": key,
            "model": self.config.model,
            "prompt_sha256": hashlib.sha256(prompt_text.encode("utf-8")).hexdigest(),
            "response": text,
            "tokens_in": tokens_in,
            "tokens_out": tokens_out,
        }
        self._audit_path.parent.mkdir(parents=True, exist_ok=True)
        with self._audit_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
