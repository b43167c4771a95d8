import pytest

from fairgram.grammar import parse_grammar

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def sort_median(xs):
    s = sorted(xs)
    n = len(s)
    if n % 2:
        return s[n // 2]
    return (s[n // 2 - 1] + s[n // 2]) / 2


def oracle_indices(xs):
    """Anomaly indices computed by full sort, independent of the package."""
    m = sort_median(xs)
    d = sort_median([abs(x - m) for x in xs])
    if d == 0:
        return [0.0 if x == m else (float("inf") if x > m else float("-inf")) for x in xs]
    return [(x - m) / d for x in xs]


def toy(rules, start="S", sensitive=(), bias=None, prob_rules=None):
    doc = {"start": start, "rules": rules, "sensitive": list(sensitive)}
    if bias is not None:
        doc["bias"] = bias
    if prob_rules is not None:
        doc["prob_rules"] = list(prob_rules)
    import json

    return parse_grammar(json.dumps(doc))


def T(s):
    return {"t": s}


def R(s):
    return {"ref": s}


@pytest.fixture
def pronoun_grammar():
    return toy(
        {
            "S": [[T("The"), R("Occ"), T("left."), R("Pron"), T("waved.")]],
            "Occ": [[T("farmer")], [T("baker")], [T("CEO")]],
            "Pron": [[T("He")], [T("She")]],
        },
        sensitive=["Pron"],
        prob_rules=["Pron"],
    )


class _Server:
    def __init__(self, token=None, status=200, plant=None, table=None):
        import http.server
        import threading

        from fairgram.mut import LexiconSA, TableMLM, ToyCoref, decode_request, encode_response

        models = {"sa": LexiconSA(plant), "coref": ToyCoref(plant), "mlm": TableMLM(table)}
        outer = self
        self.seen_auth = []

        class H(http.server.BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                outer.seen_auth.append(self.headers.get("Authorization"))
                if token is not None and self.headers.get("Authorization") != f"Bearer {token}":
                    self.send_response(401)
                    self.end_headers()
                    return
                if self.path != "/evaluate" or status != 200:
                    self.send_response(status if status != 200 else 404)
                    self.end_headers()
                    return
                req = decode_request(body)
                payload = encode_response(req["id"], models[req["task"]].evaluate(req["text"])).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self.httpd = http.server.ThreadingHTTPServer(("127.0.0.1", 0), H)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def http_server():
    made = []

    def start(**kw):
        s = _Server(**kw)
        made.append(s)
        return s

    yield start
    for s in made:
        s.close()
