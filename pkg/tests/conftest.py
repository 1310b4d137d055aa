import socket
import subprocess
import sys
import time
import urllib.request

import numpy as np
import pytest

from onepixel.imaging import RgbImage
from onepixel.modelserver import ServerConfig, serve
from onepixel.synthetic import tissue_tile

# acceptance verdicts, reported in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tile(rng):
    return tissue_tile(rng)


@pytest.fixture
def small_tile():
    return tissue_tile(np.random.default_rng(7), 8, 8)


def yellow_pixel() -> RgbImage:
    return RgbImage(np.array([[[255, 255, 0]]], dtype=np.uint8))


@pytest.fixture
def server():
    srv = serve(ServerConfig(port=0))
    yield srv
    srv.stop()


@pytest.fixture
def make_server():
    started = []

    def factory(**kwargs):
        srv = serve(ServerConfig(port=0, **kwargs))
        started.append(srv)
        return srv

    yield factory
    for srv in started:
        srv.stop()


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_healthy(url: str, timeout: float = 15.0) -> None:
    deadline = time.monotonic() + timeout
    while True:
        try:
            with urllib.request.urlopen(url + "/health", timeout=1) as resp:
                if resp.status == 200:
                    return
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


@pytest.fixture(scope="session")
def server_process():
    """The mock server running as a separate process, as a deployed model would."""
    port = free_port()
    proc = subprocess.Popen(
        [sys.executable, "-m", "onepixel", "serve", "--port", str(port)],
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    url = f"http://127.0.0.1:{port}"
    try:
        wait_healthy(url)
        yield url
    finally:
        proc.terminate()
        proc.wait(timeout=10)
