"""Newline-delimited wire protocol between a scheduler and a trainer.

One JSON object per line.  Requests carry ``{"id", "cmd", "args"}``;
responses echo the id and carry ``{"ok": true, "payload"}`` or
``{"ok": false, "error"}``.  Exactly one request is in flight at a time.

Canonical encoding rules (both endpoints must follow them so transcripts
are byte-exact across implementations):

* objects serialize with keys sorted and separators ``,``/``:``;
* every float is pre-rendered with ``canonical_float`` and sent as a JSON
  string; exact rationals are sent as ``"p/q"`` strings;
* model-state blobs travel base64-encoded.

Commands: init, train, eval, exclude, save, load, shutdown.  ``exclude``
tells the trainer a dataset left the active mixture (the simulator backend
shifts remaining peak locations on it; a real trainer may treat it as a
no-op).
"""

from __future__ import annotations

import json
import socket
import socketserver
import subprocess
import sys
import threading
from fractions import Fraction
from typing import BinaryIO, Callable

from .core import (
    MixschedError,
    MixtureSpec,
    SubDatasetSpec,
    canonical_float,
    frac_str,
    parse_frac,
)
from .dynamics import CouplingRule, DynamicsConfig, LossParams, TaskCurveParams
from .trainer import SimulatorSession, TrainerError, blob_b64, blob_from_b64


class ProtocolError(MixschedError):
    """Wire-level failure: bad framing, id mismatch, or transport loss."""


def dump_message(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode() + b"\n"


# ---------------------------------------------------------------------------
# wire codecs for domain objects
# ---------------------------------------------------------------------------


def mixture_to_obj(mixture: MixtureSpec) -> list[dict]:
    return [
        {
            "id": s.id,
            "name": s.name,
            "size": s.size,
            "weight": canonical_float(s.weight),
            "train_tokens": s.train_tokens_per_epoch,
            "eval_tokens": s.eval_tokens,
        }
        for s in mixture.subs
    ]


def mixture_from_obj(obj: list[dict]) -> MixtureSpec:
    return MixtureSpec(
        subs=tuple(
            SubDatasetSpec(
                id=o["id"],
                name=o["name"],
                size=int(o["size"]),
                weight=float(o["weight"]),
                train_tokens_per_epoch=int(o["train_tokens"]),
                eval_tokens=int(o["eval_tokens"]),
            )
            for o in obj
        )
    )


def dynamics_to_obj(config: DynamicsConfig) -> dict:
    return {
        "seed": config.seed,
        "drift_slope": canonical_float(config.drift_slope),
        "upweight_efficiency": canonical_float(config.upweight_efficiency),
        "weight_strain_penalty": canonical_float(config.weight_strain_penalty),
        "tasks": {
            ds: {
                "base": canonical_float(p.base_metric),
                "peak": canonical_float(p.peak_metric),
                "peak_location": canonical_float(p.peak_location),
                "rise_rate": canonical_float(p.rise_rate),
                "decay_rate": canonical_float(p.decay_rate),
            }
            for ds, p in sorted(config.tasks.items())
        },
        "coupling": [
            [k, j, frac_str(v)] for (k, j), v in sorted(config.coupling.shift.items())
        ],
        "loss": {
            "initial": canonical_float(config.loss.initial),
            "floor": canonical_float(config.loss.floor),
            "rate": canonical_float(config.loss.rate),
            "exclusion_drop": canonical_float(config.loss.exclusion_drop),
        },
    }


def dynamics_from_obj(obj: dict) -> DynamicsConfig:
    tasks = {
        ds: TaskCurveParams(
            base_metric=float(p["base"]),
            peak_metric=float(p["peak"]),
            peak_location=float(p["peak_location"]),
            rise_rate=float(p["rise_rate"]),
            decay_rate=float(p["decay_rate"]),
        )
        for ds, p in obj["tasks"].items()
    }
    shift = {(k, j): parse_frac(v) for k, j, v in obj.get("coupling", [])}
    loss_obj = obj.get("loss", {})
    return DynamicsConfig(
        tasks=tasks,
        coupling=CouplingRule(shift),
        seed=int(obj.get("seed", 20)),
        drift_slope=float(obj.get("drift_slope", "0.0")),
        upweight_efficiency=float(obj.get("upweight_efficiency", "0.5")),
        weight_strain_penalty=float(obj.get("weight_strain_penalty", "0.0")),
        loss=LossParams(
            initial=float(loss_obj.get("initial", "2.4")),
            floor=float(loss_obj.get("floor", "0.8")),
            rate=float(loss_obj.get("rate", "0.6")),
            exclusion_drop=float(loss_obj.get("exclusion_drop", "0.0")),
        ),
    )


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


def _handle_request(session_box: dict, obj: dict) -> dict:
    """Dispatch one parsed request against the (possibly not yet created)
    session; returns the response object."""
    req_id = obj.get("id")
    cmd = obj.get("cmd")
    args = obj.get("args") or {}
    try:
        if not isinstance(cmd, str):
            raise TrainerError("request needs a string 'cmd'")
        if cmd not in ("init", "shutdown", "train", "eval", "exclude", "save", "load"):
            raise TrainerError("unknown command")
        session = session_box.get("session")
        if cmd == "init":
            if session is not None and session.initialized:
                raise TrainerError("already initialized")
            dynamics = dynamics_from_obj(args["dynamics"])
            grid_step = parse_frac(args.get("grid_step", "1/4"))
            session = session_box["factory"](dynamics, grid_step)
            session.init(mixture_from_obj(args["mixture"]), int(args["seed"]))
            session_box["session"] = session
            payload = {"position": frac_str(Fraction(0))}
        elif cmd == "shutdown":
            session_box["stop"] = True
            payload = {"bye": True}
        else:
            if session is None:
                raise TrainerError("session not initialized")
            if cmd == "train":
                weights = {
                    ds: parse_frac(w) for ds, w in (args.get("weights") or {}).items()
                }
                session.train_delta(
                    list(args["active"]), weights or None, parse_frac(args["delta"])
                )
                payload = {"position": frac_str(session.position)}
            elif cmd == "eval":
                payload = {"metric": canonical_float(session.evaluate(args["ds"]))}
            elif cmd == "exclude":
                session.mark_excluded(args["ds"])
                payload = {"position": frac_str(session.position)}
            elif cmd == "save":
                payload = {"blob": blob_b64(session.save_state())}
            else:  # load
                session.load_state(blob_from_b64(args["blob"]))
                payload = {"position": frac_str(session.position)}
        return {"id": req_id, "ok": True, "payload": payload}
    except (TrainerError, MixschedError, KeyError, ValueError, TypeError) as exc:
        msg = str(exc) if str(exc) else type(exc).__name__
        if isinstance(exc, KeyError):
            msg = f"missing field {msg}"
        return {"id": req_id, "ok": False, "error": msg}


def serve(
    session_factory: Callable[[DynamicsConfig, Fraction], object],
    rfile: BinaryIO,
    wfile: BinaryIO,
) -> None:
    """Answer requests from a byte stream until shutdown or EOF.

    Malformed lines produce an error response with ``id: null`` and leave
    the session untouched.
    """
    box: dict = {"factory": session_factory, "session": None, "stop": False}
    while not box["stop"]:
        line = rfile.readline()
        if not line:
            break
        if not line.strip():
            continue
        try:
            obj = json.loads(line.decode())
            if not isinstance(obj, dict):
                raise ValueError("request must be a JSON object")
        except (ValueError, UnicodeDecodeError) as exc:
            resp = {"id": None, "ok": False, "error": f"parse error: {exc}"}
        else:
            resp = _handle_request(box, obj)
        wfile.write(dump_message(resp))
        wfile.flush()


def serve_stdio(session_factory=None) -> None:
    """Host one session over this process's standard streams."""
    serve(session_factory or _simulator_factory, sys.stdin.buffer, sys.stdout.buffer)


def _simulator_factory(dynamics: DynamicsConfig, grid_step: Fraction):
    return SimulatorSession(dynamics, grid_step)


class _TCPHandler(socketserver.StreamRequestHandler):
    def handle(self):
        serve(self.server.session_factory, self.rfile, self.wfile)


def serve_tcp(
    session_factory=None, host: str = "127.0.0.1", port: int = 0
) -> socketserver.ThreadingTCPServer:
    """Host independent sessions over TCP, one per connection.

    Returns the started server (caller owns shutdown); ``port=0`` picks a
    free port, available as ``server.server_address[1]``.
    """
    server = socketserver.ThreadingTCPServer((host, port), _TCPHandler)
    server.daemon_threads = True
    server.session_factory = session_factory or _simulator_factory
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------


class RemoteSession:
    """TrainerSession implementation that forwards every operation over the
    wire.  Satisfies the same contract as the in-process simulator."""

    def __init__(self, rfile: BinaryIO, wfile: BinaryIO, *, proc=None, sock=None):
        self._rfile = rfile
        self._wfile = wfile
        self._proc = proc
        self._sock = sock
        self._next_id = 0
        self._dynamics: DynamicsConfig | None = None
        self._grid_step = Fraction(1, 4)
        self._position = Fraction(0)
        self.initialized = False

    def configure(self, dynamics: DynamicsConfig, grid_step=Fraction(1, 4)) -> None:
        """Set what init() will send; mirrors building a local session."""
        self._dynamics = dynamics
        self._grid_step = parse_frac(grid_step)

    def _call(self, cmd: str, args: dict) -> dict:
        self._next_id += 1
        req_id = self._next_id
        self._wfile.write(dump_message({"id": req_id, "cmd": cmd, "args": args}))
        self._wfile.flush()
        line = self._rfile.readline()
        if not line:
            raise ProtocolError("transport closed mid-request; session aborted")
        resp = json.loads(line.decode())
        if resp.get("id") != req_id:
            raise ProtocolError(
                f"response id {resp.get('id')} does not echo request id {req_id}"
            )
        if not resp.get("ok"):
            raise TrainerError(resp.get("error", "remote error"))
        return resp.get("payload") or {}

    # -- TrainerSession contract --------------------------------------------

    @property
    def position(self) -> Fraction:
        return self._position

    def init(self, mixture: MixtureSpec, seed: int) -> None:
        if self._dynamics is None:
            raise TrainerError("RemoteSession.configure must run before init")
        self._call(
            "init",
            {
                "mixture": mixture_to_obj(mixture),
                "seed": seed,
                "dynamics": dynamics_to_obj(self._dynamics),
                "grid_step": frac_str(self._grid_step),
            },
        )
        self._position = Fraction(0)
        self.initialized = True

    def train_delta(self, active, weights, delta_c) -> None:
        args = {
            "active": list(active),
            "delta": frac_str(parse_frac(delta_c)),
        }
        if weights:
            args["weights"] = {ds: frac_str(parse_frac(w)) for ds, w in weights.items()}
        payload = self._call("train", args)
        self._position = parse_frac(payload["position"])

    def evaluate(self, ds_id: str) -> float:
        return float(self._call("eval", {"ds": ds_id})["metric"])

    def mark_excluded(self, ds_id: str) -> None:
        self._call("exclude", {"ds": ds_id})

    def save_state(self) -> bytes:
        return blob_from_b64(self._call("save", {})["blob"])

    def load_state(self, blob: bytes) -> None:
        payload = self._call("load", {"blob": blob_b64(blob)})
        self._position = parse_frac(payload["position"])

    def shutdown(self) -> None:
        try:
            self._call("shutdown", {})
        except (ProtocolError, TrainerError):
            pass
        self.close()

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.wait(timeout=10)
            self._proc = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def connect_subprocess(command: list[str]) -> RemoteSession:
    """Launch an external trainer and speak the protocol over its pipes."""
    proc = subprocess.Popen(command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    return RemoteSession(proc.stdout, proc.stdin, proc=proc)


def connect_tcp(host: str, port: int) -> RemoteSession:
    sock = socket.create_connection((host, port))
    rfile = sock.makefile("rb")
    wfile = sock.makefile("wb")
    return RemoteSession(rfile, wfile, sock=sock)
