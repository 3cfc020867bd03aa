"""Offline price contracts, per-query payment, and the page-load protocol.

Each page load runs the seven-step exchange between a user session, the
data broker and advertisers:

1. the session holds a random signed token linked to the real user id
2-4. the page request goes out under that token and reaches advertisers
5. every advertiser asks the broker whether the token is a member
6. contracted advertisers receive the user's VoD vector plus an opaque
   payload handle, and pay the max over categories of their price curves
7. the token is replaced by a fresh one

Non-contracted advertisers only ever see the token, which never repeats.
"""
from __future__ import annotations

import hashlib
import json
import logging
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DataError
from .vod import VodReport

log = logging.getLogger(__name__)

# 16-bit prefix marking broker-issued tokens; 112 random bits follow.
SIGNATURE = 0x2F0D
TOKEN_HEX = 32


@dataclass(frozen=True)
class PriceFunction:
    """Piecewise-linear map from VoD in [0, 1] to a non-negative price.

    Breakpoints must start at vod=0 and increase strictly; the last price
    extends flat to vod=1.
    """

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(v), float(p)) for v, p in self.breakpoints)
        object.__setattr__(self, "breakpoints", pts)
        if not pts:
            raise DataError("price function needs at least one breakpoint")
        xs = [v for v, _ in pts]
        if xs[0] != 0.0:
            raise DataError("first breakpoint must be at vod=0")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise DataError("breakpoints must be strictly increasing in vod")
        if xs[-1] > 1.0:
            raise DataError("breakpoints must lie in [0, 1]")
        if any(p < 0 for _, p in pts):
            raise DataError("prices must be non-negative")

    def __call__(self, vod: float) -> float:
        return evaluate_price(self, vod)

    @property
    def is_monotone(self) -> bool:
        ps = [p for _, p in self.breakpoints]
        return all(b >= a for a, b in zip(ps, ps[1:]))


def evaluate_price(p: PriceFunction, vod: float) -> float:
    if not 0.0 <= vod <= 1.0:
        raise DataError(f"vod must lie in [0, 1], got {vod}")
    xs = [v for v, _ in p.breakpoints]
    ys = [c for _, c in p.breakpoints]
    return float(np.interp(vod, xs, ys))


@dataclass
class Contract:
    advertiser_id: str
    prices: dict[str, PriceFunction]

    def __post_init__(self):
        if not self.prices:
            raise DataError(f"contract for {self.advertiser_id!r} prices no category")

    def to_json(self) -> dict:
        return {
            "advertiser_id": self.advertiser_id,
            "prices": {c: [list(bp) for bp in f.breakpoints] for c, f in self.prices.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Contract":
        try:
            prices = {str(c): PriceFunction(tuple(map(tuple, pts))) for c, pts in obj["prices"].items()}
            return cls(str(obj["advertiser_id"]), prices)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed contract: {exc}") from exc


def load_contracts(path) -> list[Contract]:
    """A JSON list of contracts (a single object is accepted too)."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(obj, dict):
        obj = [obj]
    return [Contract.from_json(o) for o in obj]


class PaymentRecord(NamedTuple):
    advertiser_id: str
    token: str
    vod: dict
    paid: float
    chosen_category: str


def payment(contract: Contract, vod_by_category: Mapping[str, float], token: str = "") -> PaymentRecord:
    """Pay the highest contracted price over the offered categories.

    Ties go to the lexicographically smallest category name.
    """
    if not vod_by_category:
        raise DataError("empty VoD map")
    missing = sorted(set(vod_by_category) - set(contract.prices))
    if missing:
        raise DataError(f"contract {contract.advertiser_id!r} has no price for {missing}")
    best_cat, best = None, -1.0
    for cat in sorted(vod_by_category):
        price = evaluate_price(contract.prices[cat], float(vod_by_category[cat]))
        if price > best:
            best_cat, best = cat, price
    return PaymentRecord(contract.advertiser_id, token, dict(vod_by_category), best, best_cat)


# ---------------------------------------------------------------------------
# Tokens and sessions
# ---------------------------------------------------------------------------

def new_token(rng: np.random.Generator) -> str:
    body = int.from_bytes(rng.bytes(14), "big")
    return f"{(SIGNATURE << 112) | body:0{TOKEN_HEX}x}"


def is_broker_token(token: str) -> bool:
    if not isinstance(token, str) or len(token) != TOKEN_HEX:
        return False
    try:
        return int(token, 16) >> 112 == SIGNATURE
    except ValueError:
        return False


@dataclass
class SessionState:
    """One user's token history. The real id never leaves this object."""

    user_id: str
    current_zorro_id: str | None = None
    id_history: list[tuple[int, str]] = field(default_factory=list)
    page_loads: int = 0
    _issued: set = field(default_factory=set, repr=False)


def rotate_id(s: SessionState, rng: np.random.Generator) -> SessionState:
    """Issue a fresh token, redrawing on the (astronomically rare) collision."""
    token = new_token(rng)
    while token in s._issued:
        token = new_token(rng)
    s._issued.add(token)
    s.current_zorro_id = token
    s.id_history.append((s.page_loads, token))
    return s


is_zorro_id = is_broker_token


def open_session(user_id: str, rng: np.random.Generator) -> SessionState:
    return rotate_id(SessionState(user_id), rng)


def payload_handle(token: str, advertiser_id: str) -> str:
    return hashlib.sha256(f"{token}:{advertiser_id}".encode()).hexdigest()[:24]


class Event(NamedTuple):
    step: int
    party: str
    kind: str
    token: str
    detail: str


def observer_view(transcript: Sequence[Event], party: str) -> list[tuple]:
    """What one party sees of a transcript, with VoD payloads stripped."""
    return [(e.step, e.kind, e.token) for e in transcript if e.party == party]


def _pick(contract: Contract, row: Mapping[str, float]) -> dict[str, float]:
    missing = sorted(set(contract.prices) - set(row))
    if missing:
        raise DataError(f"VoD report lacks categories {missing} priced by {contract.advertiser_id!r}")
    return {c: row[c] for c in sorted(contract.prices)}


def contract_vod(contract: Contract, report: VodReport, user_row: int) -> dict[str, float]:
    return _pick(contract, report.vod_for_user(user_row))


def simulate_page_load(
    s: SessionState,
    advertisers: Sequence[Contract],
    vod_source: VodReport,
    user_row: int,
    rng: np.random.Generator,
    observers: Sequence[str] = (),
    transcript: list | None = None,
) -> tuple[list[PaymentRecord], SessionState]:
    """Run one page load and rotate the token at the end.

    ``observers`` are advertiser ids without a contract; they only ever get
    the token. Querying implies paying: a contracted advertiser that receives
    a VoD vector is charged in the same step. Events are appended to
    ``transcript`` when given.
    """
    if s.current_zorro_id is None:
        rotate_id(s, rng)
    token = s.current_zorro_id
    ev = [Event(1, "user", "token", token, ""), Event(3, "user", "page_load", token, "")]
    for party in [a.advertiser_id for a in advertisers] + list(observers):
        ev.append(Event(4, party, "bid_request", token, ""))
    # frozen snapshot: every advertiser in this load reads the same row
    snapshot = vod_source.vod_for_user(user_row)
    payments = []
    for ad in advertisers:
        ev.append(Event(5, ad.advertiser_id, "check_id", token, str(is_broker_token(token))))
        vods = _pick(ad, snapshot)
        handle = payload_handle(token, ad.advertiser_id)
        ev.append(Event(6, ad.advertiser_id, "vod", token, json.dumps(vods, sort_keys=True) + "|" + handle))
        rec = payment(ad, vods, token)
        payments.append(rec)
        ev.append(Event(6, ad.advertiser_id, "pay", token, repr(rec.paid)))
    s.page_loads += 1
    rotate_id(s, rng)
    ev.append(Event(7, "user", "rotate", s.current_zorro_id, ""))
    if transcript is not None:
        transcript.extend(ev)
    return payments, s


def linkable_identities(token_streams: Sequence[Sequence[str]]) -> int:
    """How many tokens an observer sees on more than one page load."""
    seen: dict[str, int] = {}
    for load, tokens in enumerate(token_streams):
        for t in set(tokens):
            seen.setdefault(t, load)
            if seen[t] != load:
                seen[t] = -1
    return sum(1 for v in seen.values() if v == -1)


# ---------------------------------------------------------------------------
# Broker: the state behind the optional line-protocol server
# ---------------------------------------------------------------------------

class Broker:
    """Maps live tokens to user rows and settles queries against contracts.

    All methods take one lock, so a threaded server can serve several
    advertisers of the same page load; rotation is serialised with queries.
    """

    def __init__(self, contracts: Sequence[Contract], report: VodReport, seed: int = 0):
        self.lock = threading.RLock()
        self.contracts = {c.advertiser_id: c for c in contracts}
        self.report = report
        self.rng = np.random.default_rng(seed)
        self.sessions: dict[str, SessionState] = {}
        self._rows: dict[str, int] = {}
        self._live: dict[str, str] = {}        # token -> user id
        self._settled: dict[tuple[str, str], PaymentRecord] = {}
        self.ledger: list[PaymentRecord] = []

    def open(self, user_id: str, user_row: int) -> str:
        with self.lock:
            return self._open(user_id, user_row)

    def _open(self, user_id, user_row):
        s = open_session(user_id, self.rng)
        self.sessions[user_id] = s
        self._rows[user_id] = user_row
        self._live[s.current_zorro_id] = user_id
        return s.current_zorro_id

    def end_page_load(self, user_id: str) -> str:
        with self.lock:
            return self._rotate(user_id)

    def _rotate(self, user_id):
        s = self.sessions[user_id]
        self._live.pop(s.current_zorro_id, None)
        s.page_loads += 1
        rotate_id(s, self.rng)
        self._live[s.current_zorro_id] = user_id
        return s.current_zorro_id

    def check_id(self, token: str) -> bool:
        return is_broker_token(token) and token in self._live

    def query_vod(self, token: str, advertiser_id: str) -> tuple[dict, str, PaymentRecord]:
        if not self.check_id(token):
            raise DataError("unknown or expired token")
        if advertiser_id not in self.contracts:
            raise DataError(f"no contract for advertiser {advertiser_id!r}")
        key = (token, advertiser_id)
        if key not in self._settled:
            row = self._rows[self._live[token]]
            ad = self.contracts[advertiser_id]
            rec = payment(ad, contract_vod(ad, self.report, row), token)
            self._settled[key] = rec
            self.ledger.append(rec)
        rec = self._settled[key]
        return rec.vod, payload_handle(token, advertiser_id), rec

    def pay(self, token: str, advertiser_id: str) -> PaymentRecord:
        key = (token, advertiser_id)
        if key not in self._settled:
            raise DataError("nothing to settle: query_vod first")
        return self._settled[key]

    def handle(self, msg: Mapping) -> dict:
        """One protocol request to one response; the correlation id is echoed."""
        cid = msg.get("id") if isinstance(msg, Mapping) else None
        try:
            if not isinstance(msg, Mapping):
                raise DataError("request must be a JSON object")
            kind = msg.get("type")
            token = str(msg.get("token", ""))
            with self.lock:
                if kind == "check_id":
                    return {"id": cid, "ok": True, "member": self.check_id(token)}
                if kind == "query_vod":
                    vods, handle, rec = self.query_vod(token, str(msg.get("advertiser_id", "")))
                    return {"id": cid, "ok": True, "vod": vods, "payload": handle}
                if kind == "pay":
                    rec = self.pay(token, str(msg.get("advertiser_id", "")))
                    return {"id": cid, "ok": True, "paid": rec.paid, "chosen_category": rec.chosen_category}
            raise DataError(f"unknown message type {kind!r}")
        except DataError as exc:
            return {"id": cid, "ok": False, "error": str(exc)}


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as exc:
                reply = {"id": None, "ok": False, "error": f"bad json: {exc.msg}"}
            else:
                reply = self.server.broker.handle(msg)
            self.wfile.write((json.dumps(reply, sort_keys=True) + "\n").encode())
            self.wfile.flush()


class ProtocolServer(socketserver.ThreadingTCPServer):
    """Newline-delimited JSON over TCP in front of a :class:`Broker`."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0):
        self.broker = broker
        super().__init__((host, port), _LineHandler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]
