"""Two-level ad link identification.

Level 1 flags links that leave the page's registrable domain. Level 2 looks
the external URL up in a parsed subset of the EasyList rule syntax and in a
hand-maintained keyword list. Only URLs passing both levels are ads.

Supported rule syntax: plain substrings, ``||`` domain anchors, ``|`` start
and end anchors, the ``^`` separator, ``*`` wildcards and ``@@`` exceptions.
Element hiding, ``/regex/`` rules and ``$option`` rules are skipped with a
diagnostic rather than half-applied.
"""
from __future__ import annotations

import ipaddress
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, NamedTuple, Sequence
from urllib.parse import urlsplit

from .errors import DataError

SEPARATOR = r"(?:[^A-Za-z0-9_\-.%]|$)"
KINDS = ("substring", "anchored-domain", "start-anchor", "end-anchor", "separator-wildcard", "wildcard")

# scheme, "//", then any run of whole subdomain labels
_DOMAIN_PREFIX = r"^[A-Za-z][A-Za-z0-9+.\-]*://(?:[^/?#]*\.)?"


class MalformedURLError(DataError):
    pass


def _tokens(body: str) -> tuple[str, ...]:
    """Split a rule body into literal runs, ``^`` and ``*``."""
    return tuple(t for t in re.split(r"([\^*])", body) if t)


def _regex(tokens, domain_anchor, start, end) -> str:
    parts = [_DOMAIN_PREFIX if domain_anchor else ("^" if start else "")]
    for t in tokens:
        if t == "^":
            parts.append(SEPARATOR)
        elif t == "*":
            parts.append(".*")
        else:
            parts.append(re.escape(t))
    if end:
        parts.append("$")
    return "".join(parts)


@dataclass(frozen=True)
class FilterRule:
    raw: str
    kind: str
    pattern: tuple[str, ...]
    is_exception: bool = False
    domain_anchor: bool = False
    start_anchor: bool = False
    end_anchor: bool = False
    _re: re.Pattern = field(default=None, compare=False, repr=False)

    def render(self) -> str:
        out = "@@" if self.is_exception else ""
        out += "||" if self.domain_anchor else ("|" if self.start_anchor else "")
        out += "".join(self.pattern)
        return out + ("|" if self.end_anchor else "")

    def matches(self, url: str) -> bool:
        """``url`` must already be normalised (lower-case scheme and host)."""
        return self._re.search(url) is not None


def parse_rule(line: str) -> tuple[FilterRule | None, str]:
    """Parse one line. Returns (rule or None, diagnostic code)."""
    text = line.strip()
    if not text:
        return None, "blank"
    if text.startswith("!"):
        return None, "comment"
    if text.startswith("[") and text.lower().startswith("[adblock"):
        return None, "header"
    if "##" in text or "#@#" in text or "#?#" in text or "#$#" in text:
        return None, "element-hiding"
    exception = text.startswith("@@")
    body = text[2:] if exception else text
    if "$" in body:
        return None, "options"
    if len(body) > 1 and body.startswith("/") and body.endswith("/"):
        return None, "regex"
    dom = body.startswith("||")
    if dom:
        body = body[2:]
    start = not dom and body.startswith("|")
    if start:
        body = body[1:]
    end = body.endswith("|")
    if end:
        body = body[:-1]
    if not body or "|" in body:
        return None, "unsupported"
    if dom:
        # host part of a domain rule is matched case-insensitively
        cut = min((i for i in (body.find("/"), body.find("^"), body.find("*")) if i >= 0), default=len(body))
        body = body[:cut].lower() + body[cut:]
    toks = _tokens(body)
    if dom:
        kind = "anchored-domain"
    elif start:
        kind = "start-anchor"
    elif end:
        kind = "end-anchor"
    elif "^" in toks:
        kind = "separator-wildcard"
    elif "*" in toks:
        kind = "wildcard"
    else:
        kind = "substring"
    rx = re.compile(_regex(toks, dom, start, end))
    return FilterRule(text, kind, toks, exception, dom, start, end, rx), "parsed"


class Diagnostic(NamedTuple):
    lineno: int
    code: str
    text: str


@dataclass
class RuleList:
    rules: list[FilterRule]
    diagnostics: list[Diagnostic]

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(d.code for d in self.diagnostics)
        c["parsed"] = len(self.rules)
        return dict(sorted(c.items()))

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)


def parse_rules(text: str | Iterable[str]) -> RuleList:
    """Parse a rule list. Never raises on a bad line; see ``diagnostics``."""
    lines = text.splitlines() if isinstance(text, str) else text
    rules, diags = [], []
    for lineno, line in enumerate(lines, 1):
        try:
            rule, code = parse_rule(line)
        except re.error:
            rule, code = None, "unsupported"
        if rule is None:
            diags.append(Diagnostic(lineno, code, line.rstrip("\n")))
        else:
            rules.append(rule)
    return RuleList(rules, diags)


def load_rules(path) -> RuleList:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())


# ---------------------------------------------------------------------------
# Hosts and registrable domains
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def public_suffixes() -> frozenset[str]:
    text = resources.files("vodkit").joinpath("data/public_suffixes.txt").read_text(encoding="utf-8")
    return frozenset(
        ln.strip().lower() for ln in text.splitlines() if ln.strip() and not ln.startswith("//")
    )


def registrable_domain(host: str, suffixes: frozenset[str] | None = None) -> str:
    """Longest listed public suffix plus one label; IPs are returned as-is."""
    host = host.strip().lower().rstrip(".")
    if not host:
        raise MalformedURLError("empty host")
    try:
        ipaddress.ip_address(host.strip("[]"))
        return host
    except ValueError:
        pass
    suffixes = public_suffixes() if suffixes is None else suffixes
    labels = host.split(".")
    if any(not lb for lb in labels):
        raise MalformedURLError(f"bad host {host!r}")
    n_suffix = 1
    for i in range(len(labels)):
        if ".".join(labels[i:]) in suffixes:
            n_suffix = len(labels) - i
            break
    if n_suffix >= len(labels):
        return host
    return ".".join(labels[-(n_suffix + 1):])


_HOST_RE = re.compile(r"^[a-z0-9\-._\[\]:]+$")


def normalise_url(url: str) -> tuple[str, str]:
    """Lower-case the scheme and host, keep the rest. Returns (url, host)."""
    if not isinstance(url, str) or any(c.isspace() for c in url):
        raise MalformedURLError(f"malformed URL {url!r}")
    try:
        parts = urlsplit(url)
        host = parts.hostname
        parts.port
    except ValueError as exc:
        raise MalformedURLError(f"malformed URL {url!r}: {exc}") from exc
    if parts.scheme.lower() not in ("http", "https") or not host or not _HOST_RE.match(host):
        raise MalformedURLError(f"malformed URL {url!r}")
    head = f"{parts.scheme.lower()}://{parts.netloc.lower()}"
    return head + url[len(parts.scheme) + 3 + len(parts.netloc):], host


def _page_host(page_host: str) -> str:
    if "://" in page_host:
        return normalise_url(page_host)[1]
    h = page_host.strip().lower()
    if not h or not _HOST_RE.match(h):
        raise MalformedURLError(f"malformed page host {page_host!r}")
    return h


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

class Verdict(NamedTuple):
    is_ad: bool
    level1: bool
    level2: FilterRule | str | None   # matched rule, matched keyword, or None

    def to_json(self) -> dict:
        l2 = self.level2.raw if isinstance(self.level2, FilterRule) else self.level2
        kind = "rule" if isinstance(self.level2, FilterRule) else ("keyword" if self.level2 else None)
        return {"is_ad": self.is_ad, "level1": self.level1, "level2": l2, "level2_kind": kind}


def match_rules(url: str, rules: Sequence[FilterRule]) -> FilterRule | None:
    """Blocking rule for an already-normalised URL, or None.

    Any matching exception wins. When several blocking rules match, the
    one with the smallest raw text is reported so the result does not
    depend on rule order.
    """
    hit = None
    for r in rules:
        if r.matches(url):
            if r.is_exception:
                return None
            if hit is None or r.raw < hit.raw:
                hit = r
    return hit


def classify_url(page_host: str, link_url: str, rules: Sequence[FilterRule], keywords: Sequence[str] = ()) -> Verdict:
    url, host = normalise_url(link_url)
    page = _page_host(page_host)
    level1 = registrable_domain(host) != registrable_domain(page)
    if not level1:
        return Verdict(False, False, None)
    level2 = match_rules(url, rules)
    if level2 is None:
        low = url.lower()
        found = sorted(k for k in keywords if k and k.lower() in low)
        level2 = found[0] if found else None
    return Verdict(level2 is not None, True, level2)
