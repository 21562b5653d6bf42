import pytest
import requests

from xraygpt.errors import ServiceUnavailableError
from xraygpt.service import TOKEN_ENV_VAR, HttpTextClient, MockTextClient


class _FakeResponse:
    def __init__(self, body, status=200):
        self._body = body
        self.status_code = status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f"status {self.status_code}")

    def json(self):
        return self._body


def test_http_client_posts_payload(monkeypatch):
    seen = {}

    def fake_post(url, json=None, headers=None, timeout=None):
        seen.update(url=url, json=json, headers=headers, timeout=timeout)
        return _FakeResponse({"text": "hello"})

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.setenv(TOKEN_ENV_VAR, "sekrit")
    client = HttpTextClient("http://svc/complete", timeout=9.0)
    assert client.complete("sys", "usr") == "hello"
    assert seen["url"] == "http://svc/complete"
    assert seen["json"] == {"system_text": "sys", "user_text": "usr"}
    assert seen["headers"]["Authorization"] == "Bearer sekrit"
    assert seen["timeout"] == 9.0


def test_http_client_no_token_no_header(monkeypatch):
    def fake_post(url, json=None, headers=None, timeout=None):
        assert "Authorization" not in headers
        return _FakeResponse({"text": "ok"})

    monkeypatch.setattr(requests, "post", fake_post)
    monkeypatch.delenv(TOKEN_ENV_VAR, raising=False)
    assert HttpTextClient("http://svc").complete("s", "u") == "ok"


def test_http_client_retries_then_fails(monkeypatch):
    calls = []

    def fake_post(url, **kw):
        calls.append(url)
        raise requests.ConnectionError("refused")

    monkeypatch.setattr(requests, "post", fake_post)
    client = HttpTextClient("http://down", max_retries=3, retry_wait=0.0)
    with pytest.raises(ServiceUnavailableError):
        client.complete("s", "u")
    assert len(calls) == 3


def test_http_client_recovers_on_retry(monkeypatch):
    responses = [requests.ConnectionError("refused"), _FakeResponse({"text": "late"})]

    def fake_post(url, **kw):
        item = responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    monkeypatch.setattr(requests, "post", fake_post)
    client = HttpTextClient("http://flaky", retry_wait=0.0)
    assert client.complete("s", "u") == "late"


def test_http_client_rejects_malformed_body(monkeypatch):
    monkeypatch.setattr(
        requests, "post", lambda url, **kw: _FakeResponse({"wrong": 1})
    )
    client = HttpTextClient("http://svc", max_retries=1, retry_wait=0.0)
    with pytest.raises(ServiceUnavailableError):
        client.complete("s", "u")


def test_http_client_http_error(monkeypatch):
    monkeypatch.setattr(requests, "post", lambda url, **kw: _FakeResponse({}, status=503))
    client = HttpTextClient("http://svc", max_retries=2, retry_wait=0.0)
    with pytest.raises(ServiceUnavailableError):
        client.complete("s", "u")


def test_mock_client_replays_and_records():
    client = MockTextClient(replies=["one", "two"])
    assert client.complete("s1", "u1") == "one"
    assert client.complete("s2", "u2") == "two"
    assert client.calls == [("s1", "u1"), ("s2", "u2")]
    with pytest.raises(ServiceUnavailableError):
        client.complete("s3", "u3")


def test_mock_client_callable():
    client = MockTextClient(fn=lambda s, u: u.upper())
    assert client.complete("sys", "abc") == "ABC"
