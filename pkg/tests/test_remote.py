import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from fgrpo.remote import (
    RemoteJudgeClient,
    consistency_payload,
    context_block,
    parse_verdict,
    prompt_template,
    sentence_payload,
)
from fgrpo.rewards import (
    ConsistencyQuery,
    JudgeError,
    JudgeVerdictC,
    JudgeVerdictS,
    SentenceQuery,
    consistency_reward,
)


class StubServer:
    """Replays a scripted list of (status, body) replies; ``None`` closes without answering."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                stub.requests.append(json.loads(self.rfile.read(length)))
                status, body = stub.script.pop(0) if stub.script else (200, {"verdict": "YES"})
                if status is None:
                    self.close_connection = True
                    self.connection.close()
                    return
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/judge"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def client(url, sleeps=None):
    return RemoteJudgeClient(url, timeout=5, sleep=(sleeps.append if sleeps is not None else lambda s: None))


CQ = ConsistencyQuery("Which shape is left of the box?", "The circle is left of the box.", "circle")
SQ = SentenceQuery("scene-7", "Which shape is left of the box?", ("The box is red.",), "The circle is left of the box.")


def test_yes_verdict():
    with StubServer([(200, {"verdict": " YES\n"})]) as srv:
        assert client(srv.url).consistency(CQ) is JudgeVerdictC.YES
    assert srv.requests[0]["prompt_template_id"] == "consistency"
    assert srv.requests[0]["max_completion_tokens"] == 1024


def test_sentence_verdict_and_image_ref():
    with StubServer([(200, {"verdict": "SKIP"})]) as srv:
        assert client(srv.url).sentence(SQ) is JudgeVerdictS.SKIP
    assert srv.requests[0]["image_ref"] == "scene-7"


@pytest.mark.parametrize("reply", [{"verdict": "maybe"}, {"verdict": "yes"}, {"answer": "YES"}, {"verdict": 1}])
def test_unparseable_verdict_is_failure(reply):
    with StubServer([(200, reply)]) as srv:
        with pytest.raises(JudgeError):
            client(srv.url).consistency(CQ)


def test_retries_then_succeeds():
    sleeps = []
    with StubServer([(None, None), (503, {}), (200, {"verdict": "NO"})]) as srv:
        assert client(srv.url, sleeps).consistency(CQ) is JudgeVerdictC.NO
    assert len(srv.requests) == 3
    assert sleeps == [0.5, 1.0]


def test_gives_up_after_three_attempts():
    with StubServer([(500, {})] * 3) as srv:
        with pytest.raises(JudgeError):
            client(srv.url).consistency(CQ)
    assert len(srv.requests) == 3


def test_client_error_is_not_retried():
    with StubServer([(400, {})]) as srv:
        with pytest.raises(JudgeError):
            client(srv.url).consistency(CQ)
    assert len(srv.requests) == 1


def test_failure_masks_consistency_out():
    with StubServer([(500, {})] * 3) as srv:
        judges = client(srv.url).judges()
        value, mask = consistency_reward(judges, CQ, r_acc=1)
    assert (value, mask) == (None, 0)
    assert judges.failures == 1


def test_wrong_answer_makes_no_call():
    with StubServer([]) as srv:
        judges = client(srv.url).judges()
        assert consistency_reward(judges, CQ, r_acc=0) == (None, 0)
    assert srv.requests == []


def test_payload_embeds_template_text():
    p = consistency_payload(CQ)
    head = prompt_template("consistency").split("{question}")[0]
    assert p["prompt"].startswith(head)
    assert "Reasoning: The circle is left of the box." in p["prompt"]
    assert "{" not in p["prompt"]
    s = sentence_payload(SQ)
    assert s["prompt_template_id"] == "semantic_grounding"
    assert "1. The box is red." in s["prompt"] and "LATEST SENTENCE: The circle is left of the box." in s["prompt"]


def test_context_block_empty():
    assert "(none)" in context_block((), "First.")


def test_templates_are_ascii():
    for tid in ("consistency", "semantic_grounding"):
        prompt_template(tid).encode("ascii")
    with pytest.raises(KeyError):
        prompt_template("nope")


def test_parse_verdict_rejects_garbage():
    with pytest.raises(JudgeError):
        parse_verdict(b"not json", JudgeVerdictC)


def test_from_env(monkeypatch):
    monkeypatch.delenv("FGRPO_JUDGE_ENDPOINT", raising=False)
    with pytest.raises(JudgeError):
        RemoteJudgeClient.from_env()
    monkeypatch.setenv("FGRPO_JUDGE_ENDPOINT", "http://example.invalid/")
    assert RemoteJudgeClient.from_env().endpoint == "http://example.invalid/"
