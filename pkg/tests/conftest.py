import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from PIL import Image

from pickhtp import _pykernels

try:
    from pickhtp import _kernels as _ckernels
except ImportError:  # extension not built
    _ckernels = None

KERNEL_IMPLS = [pytest.param(_pykernels, id="python")]
if _ckernels is not None:
    KERNEL_IMPLS.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=KERNEL_IMPLS)
def kernel_impl(request):
    return request.param


class StubServer:
    """Tiny JSON HTTP server that replays a scripted list of (status, body) replies."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                server.requests.append({"body": body, "headers": dict(self.headers)})
                if server.replies:
                    status, payload = server.replies.pop(0)
                else:
                    status, payload = 500, {"error": "no scripted reply"}
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def make(replies):
        s = StubServer(replies).__enter__()
        servers.append(s)
        return s

    yield make
    for s in servers:
        s.__exit__(None, None, None)


# Five small drawings covering 1, 2 and 3 main objects, neighbours, and a dedupe case.
FIXTURE_DRAWINGS = {
    "d1_single": {
        "label": "Positive",
        "detections": [
            {"label": "house", "box": [10, 10, 60, 80], "score": 0.92},
            {"label": "sun", "box": [80, 0, 99, 15], "score": 0.8},
        ],
    },
    "d2_pair": {
        "label": "Negative",
        "detections": [
            {"label": "house", "box": [5, 30, 45, 90], "score": 0.9},
            {"label": "tree", "box": [55, 20, 95, 95], "score": 0.85},
            {"label": "flower", "box": [40, 80, 60, 99], "score": 0.6},
        ],
    },
    "d3_triple": {
        "label": "Positive",
        "detections": [
            {"label": "house", "box": [0, 40, 30, 90], "score": 0.9},
            {"label": "tree", "box": [35, 10, 65, 90], "score": 0.8},
            {"label": "person", "box": [70, 50, 90, 95], "score": 0.7},
        ],
    },
    "d4_neighbors": {
        "label": "Negative",
        "detections": [
            {"label": "tree", "box": [0, 0, 50, 50], "score": 0.9},
            {"label": "flower", "box": [40, 40, 60, 60], "score": 0.5},
            {"label": "cloud", "box": [45, 0, 70, 10], "score": 0.5},
            {"label": "person", "box": [60, 40, 90, 98], "score": 0.8},
        ],
    },
    "d5_stacked": {
        "label": "Positive",
        "detections": [
            {"label": "person", "box": [10, 10, 40, 90], "score": 0.9},
            {"label": "person", "box": [42, 10, 72, 90], "score": 0.9},
            {"label": "tree", "box": [20, 20, 30, 30], "score": 0.6},
        ],
    },
}


def write_corpus(root, drawings=FIXTURE_DRAWINGS, size=(100, 100)):
    """Write PNGs, detection files and a manifest; returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (cid, drawing) in enumerate(drawings.items()):
        img = Image.new("RGB", size, (255, 255, 255))
        img.putpixel((i, i), (0, 0, 0))
        img.save(root / f"{cid}.png")
        (root / f"{cid}.json").write_text(json.dumps(drawing["detections"]))
        lines.append(json.dumps({"id": cid, "image": f"{cid}.png", "detections": f"{cid}.json", "label": drawing["label"]}))
    manifest = root / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path / "corpus")


def make_pipeline(seed=0, backend=None, class_names=None, task="htp", **config):
    """Pipeline on bundled data with the mock backend unless another backend is given."""
    from pickhtp.backend import Gateway, MockBackend
    from pickhtp.cli import _data_path, bundled_kb
    from pickhtp.harness import Pipeline, PipelineConfig
    from pickhtp.knowledge import ingest_kb
    from pickhtp.policy import FeaturePolicy, FeatureVocabulary
    from pickhtp.reward import BINARY_CLASSES, train_scorer

    class_names = tuple(class_names or BINARY_CLASSES)
    kb = ingest_kb(*bundled_kb(task), class_names=class_names)
    scorer = train_scorer([(r.head, r.soft_label) for r in kb.records])
    policy = FeaturePolicy(FeatureVocabulary.load(_data_path("vocabulary.json")), seed=seed)
    gateway = Gateway(backend or MockBackend(seed=seed), class_names)
    cfg = PipelineConfig(task=task, class_names=class_names, seed=seed, **config)
    return Pipeline(gateway, kb, scorer, policy, cfg)


# -- acceptance summary: one line per criterion --------------------------------

_acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.kwargs["criterion"], marker.kwargs["title"]
    if report.when == "call" or report.failed:
        prev = _acceptance_results.get(number)
        passed = report.passed and (prev is None or prev[1])
        detail = ""
        if report.failed and call.excinfo is not None:
            detail = str(call.excinfo.value).splitlines()[0][:160]
        _acceptance_results[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_results):
        title, passed, detail = _acceptance_results[number]
        line = f"criterion {number:2d} {title:<36} {'PASS' if passed else 'FAIL'}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
