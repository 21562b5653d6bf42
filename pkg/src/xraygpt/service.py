"""Wire client for the external text services (rewrite and judge).

Both services share one contract: POST {system_text, user_text} to an
endpoint, receive {text}. The auth token comes from the environment so
it never lands in config files.
"""

from __future__ import annotations

import logging
import os
import time
from typing import Protocol

import requests

from .errors import ServiceUnavailableError

TOKEN_ENV_VAR = "XRAYGPT_SERVICE_TOKEN"

logger = logging.getLogger(__name__)


class TextServiceClient(Protocol):
    def complete(self, system_text: str, user_text: str) -> str: ...


class HttpTextClient:
    """Synchronous request/response client with bounded retries."""

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        max_retries: int = 3,
        retry_wait: float = 1.0,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_retries = max_retries
        self.retry_wait = retry_wait

    def complete(self, system_text: str, user_text: str) -> str:
        headers = {}
        token = os.environ.get(TOKEN_ENV_VAR)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {"system_text": system_text, "user_text": user_text}
        last_exc: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                resp = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                resp.raise_for_status()
                body = resp.json()
                if not isinstance(body, dict) or not isinstance(body.get("text"), str):
                    raise ValueError("response body lacks a 'text' string")
                return body["text"]
            except (requests.RequestException, ValueError) as exc:
                last_exc = exc
                logger.warning("service call failed (attempt %d/%d): %s", attempt, self.max_retries, exc)
                if attempt < self.max_retries:
                    time.sleep(self.retry_wait)
        raise ServiceUnavailableError(f"service at {self.endpoint} failed: {last_exc}")


class MockTextClient:
    """Scripted client for tests: replays canned replies or a callable."""

    def __init__(self, replies=None, fn=None):
        self._replies = list(replies) if replies is not None else None
        self._fn = fn
        self.calls: list[tuple[str, str]] = []

    def complete(self, system_text: str, user_text: str) -> str:
        self.calls.append((system_text, user_text))
        if self._fn is not None:
            return self._fn(system_text, user_text)
        if not self._replies:
            raise ServiceUnavailableError("mock client exhausted")
        return self._replies.pop(0)
