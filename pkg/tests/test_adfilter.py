import itertools
import json
import random
import re
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vodkit.adfilter import (
    MalformedURLError, classify_url, load_rules, match_rules, normalise_url, parse_rule, parse_rules,
    registrable_domain,
)

DATA = Path(__file__).parent / "data"
AUDIT = json.loads((DATA / "easylist_audit.json").read_text())


@pytest.fixture(scope="module")
def corpus():
    return load_rules(DATA / "easylist_subset.txt")


# --- parsing -----------------------------------------------------------------

def test_comment_only():
    rl = parse_rules("! comment")
    assert len(rl) == 0 and rl.counts == {"comment": 1, "parsed": 0}


def test_doubleclick_rule():
    rl = parse_rules("||doubleclick.net^")
    assert len(rl) == 1 and rl.rules[0].kind == "anchored-domain" and not rl.rules[0].is_exception


def test_corpus_matches_audit(corpus):
    assert corpus.counts == AUDIT["counts"]
    assert dict(Counter(r.kind for r in corpus)) == AUDIT["kinds"]
    assert sorted(r.raw for r in corpus if r.is_exception) == sorted(AUDIT["exceptions"])
    assert {str(d.lineno): d.code for d in corpus.diagnostics} == AUDIT["skipped_lines"]


@pytest.mark.parametrize("line,code", [
    ("example.com##.ad", "element-hiding"), ("##.ad", "element-hiding"), ("site#@#.x", "element-hiding"),
    ("/ads/$third-party", "options"), ("@@||x.com^$image", "options"), ("/ads[0-9]/", "regex"),
    ("[Adblock Plus 2.0]", "header"), ("   ", "blank"), ("||", "unsupported"), ("a|b", "unsupported"),
])
def test_skipped_kinds(line, code):
    rule, got = parse_rule(line)
    assert rule is None and got == code


def test_parse_is_total_on_garbage():
    rl = parse_rules(["\x00\x01", "|||", "@@", "||a^b|c", "*" * 50, "é/ünï"])
    assert len(rl) + len(rl.diagnostics) == 6


def test_render_round_trip_on_corpus(corpus):
    urls = [u for u, *_ in AUDIT["verdicts"]]
    for r in corpus:
        again, code = parse_rule(r.render())
        assert code == "parsed" and again.kind == r.kind and again.is_exception == r.is_exception
        for u in urls:
            n, _ = normalise_url(u)
            assert again.matches(n) == r.matches(n), (r.raw, u)


def test_domain_rule_host_case_folded():
    rule, _ = parse_rule("||Ads.Example.COM/Path^")
    assert rule.pattern[0] == "ads.example.com/Path"
    assert rule.matches("https://ads.example.com/Path/")
    assert not rule.matches("https://ads.example.com/path/")


# --- separator ---------------------------------------------------------------

def test_separator_exhaustive_ascii():
    rule, _ = parse_rule("/x^")
    for code in range(128):
        c = chr(code)
        expected = not (c.isascii() and (c.isalnum() or c in "_-.%"))
        assert rule.matches("http://h.com/x" + c + "y") == expected, repr(c)
    assert rule.matches("http://h.com/x")  # end of string


def test_anchors():
    start, _ = parse_rule("|http://ads.")
    end, _ = parse_rule(".swf|")
    assert start.matches("http://ads.x.com/") and not start.matches("https://y.com/?u=http://ads.x.com")
    assert end.matches("http://x.com/a.swf") and not end.matches("http://x.com/a.swf?x")


def test_domain_anchor_label_boundary():
    rule, _ = parse_rule("||example.com^")
    assert rule.matches("https://example.com/")
    assert rule.matches("https://a.b.example.com:8080/")
    assert not rule.matches("https://badexample.com/")
    assert not rule.matches("https://x.com/?r=example.com/")


# --- classification ----------------------------------------------------------

@pytest.mark.parametrize("url,is_ad,level1,level2", AUDIT["verdicts"])
def test_corpus_verdicts(corpus, url, is_ad, level1, level2):
    v = classify_url(AUDIT["page_host"], url, corpus.rules, AUDIT["keywords"]).to_json()
    assert (v["is_ad"], v["level1"], v["level2"]) == (is_ad, level1, level2)


def test_same_domain_never_ad(corpus):
    v = classify_url("news.bbc.co.uk", "https://www.bbc.co.uk/doubleclick.net/ad.swf", corpus.rules, ["doubleclick"])
    assert v.is_ad is False and v.level1 is False and v.level2 is None


def test_keyword_marks_external_link():
    v = classify_url("www.site.com", "https://cdn.other.net/?ref=doubleclick", [], ["doubleclick", "criteo"])
    assert v.is_ad and v.level2 == "doubleclick"


FIVE = ["||ads.net^", "/banner/*", "@@||ads.net/ok/", "-promo.", "@@/banner/house-"]


def test_exception_precedence_all_orderings():
    rules = [parse_rule(r)[0] for r in FIVE]
    cases = {
        "https://ads.net/x": "||ads.net^",
        "https://ads.net/ok/banner/1": None,
        "https://z.org/banner/house-a": None,
        "https://z.org/banner/a-promo.gif": "-promo.",
        "https://z.org/none": None,
    }
    for perm in itertools.permutations(rules):
        for url, want in cases.items():
            hit = match_rules(normalise_url(url)[0], perm)
            assert (hit.raw if hit else None) == want, (url, [r.raw for r in perm])


def test_order_independence_on_corpus(corpus):
    shuffled = corpus.rules[:]
    for seed in range(5):
        random.Random(seed).shuffle(shuffled)
        for url, *_ in AUDIT["verdicts"]:
            a = classify_url(AUDIT["page_host"], url, corpus.rules, AUDIT["keywords"])
            b = classify_url(AUDIT["page_host"], url, shuffled, AUDIT["keywords"][::-1])
            assert a == b


@pytest.mark.parametrize("bad", [
    "", "not a url", "ftp://x.com/a", "http://", "https:///path", "http://exa mple.com/", "javascript:alert(1)",
    "http://x.com:99999/", "http://[::1/", None,
])
def test_malformed_urls(corpus, bad):
    with pytest.raises(MalformedURLError):
        classify_url("www.site.com", bad, corpus.rules)


def test_malformed_page_host():
    with pytest.raises(MalformedURLError):
        classify_url("bad host!", "https://x.com/", [])


@pytest.mark.parametrize("host,reg", [
    ("www.example.com", "example.com"), ("a.b.example.co.uk", "example.co.uk"), ("example.com", "example.com"),
    ("co.uk", "co.uk"), ("user.github.io", "user.github.io"), ("x.y.unknowntld", "y.unknowntld"),
    ("WWW.Example.COM.", "example.com"), ("10.0.0.1", "10.0.0.1"), ("localhost", "localhost"),
])
def test_registrable_domain(host, reg):
    assert registrable_domain(host) == reg


def test_normalise_keeps_path_case():
    assert normalise_url("HTTPS://WWW.X.Com/Path?Q=A") == ("https://www.x.com/Path?Q=A", "www.x.com")


# --- properties --------------------------------------------------------------

_label = st.from_regex(r"[a-z0-9]([a-z0-9\-]{0,8}[a-z0-9])?", fullmatch=True)
_host = st.builds(lambda ls, tld: ".".join(ls + [tld]), st.lists(_label, min_size=1, max_size=3),
                  st.sampled_from(["com", "net", "co.uk", "org", "io", "de"]))
_path = st.text(alphabet="abcdefghijklmnopqrstuvwxyzABC0123456789/._-?=&%^", max_size=30)
_url = st.builds(lambda s, h, p: f"{s}://{h}/{p}", st.sampled_from(["http", "https"]), _host, _path)


@settings(max_examples=300, deadline=None)
@given(page=_host, url=_url)
def test_is_ad_implies_external(corpus, page, url):
    v = classify_url(page, url, corpus.rules, AUDIT["keywords"])
    assert not v.is_ad or v.level1
    assert v.is_ad == (v.level2 is not None)


@settings(max_examples=200, deadline=None)
@given(body=st.text(alphabet="abc./-_^*", min_size=1, max_size=8), url=_url)
def test_generated_rules_render_and_match_like_regex_oracle(body, url):
    rule, code = parse_rule(body)
    if rule is None:
        return
    # independent oracle: translate with fnmatch-like rules by hand
    rx = "".join(
        r"(?:[^A-Za-z0-9_\-.%]|$)" if c == "^" else ".*" if c == "*" else re.escape(c) for c in body
    )
    n, _ = normalise_url(url)
    assert rule.matches(n) == (re.search(rx, n) is not None)
    assert parse_rule(rule.render())[0].matches(n) == rule.matches(n)
