"""Independent reference computation for metrics.json. Run: python3 oracle.py > metrics.json"""
import json
import math
import re
from collections import Counter


def tok(s):
    out = []
    for w in s.lower().split():
        w = re.sub(r"[^0-9a-z]", "", w)
        if w:
            out.append(w)
    return out


def grams(t, n):
    return Counter(tuple(t[i:i + n]) for i in range(len(t) - n + 1))


def bleu(corpus):
    match = [0] * 4
    total = [0] * 4
    c = r = 0
    for cand, refs in corpus:
        c += len(cand)
        r += sorted((abs(len(x) - len(cand)), len(x)) for x in refs)[0][1]
        for n in range(1, 5):
            cg = grams(cand, n)
            best = Counter()
            for x in refs:
                best |= grams(x, n)
            match[n - 1] += sum(min(k, best[g]) for g, k in cg.items())
            total[n - 1] += sum(cg.values())
    bp = 0.0 if c == 0 else (1.0 if c > r else math.exp(1 - r / c))
    if 0 in match:
        score = 0.0
    else:
        score = 100 * bp * math.exp(sum(math.log(m / t) for m, t in zip(match, total)) / 4)
    return {"matches": match, "totals": total, "candidate_len": c, "reference_len": r,
            "brevity_penalty": bp, "score": score}


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a)):
        for j in range(len(b)):
            table[i + 1][j + 1] = table[i][j] + 1 if a[i] == b[j] else max(table[i][j + 1], table[i + 1][j])
    return table[-1][-1]


def rouge(corpus, beta_sq=1.2):
    vals = []
    for cand, refs in corpus:
        best = 0.0
        for x in refs:
            l = lcs(cand, x)
            if l == 0 or not cand or not x:
                continue
            p, rc = l / len(cand), l / len(x)
            best = max(best, (1 + beta_sq) * p * rc / (rc + beta_sq * p))
        vals.append(best)
    return 100 * sum(vals) / len(vals)


def cider(corpus, sigma=6.0):
    n_docs = len(corpus)
    df = Counter()
    for _, refs in corpus:
        seen = set()
        for x in refs:
            for n in range(1, 5):
                seen |= set(grams(x, n))
        df.update(seen)

    def vec(t):
        v = []
        for n in range(1, 5):
            v.append({g: k * (math.log(n_docs) - math.log(max(1, df[g]))) for g, k in grams(t, n).items()})
        return v

    per = []
    for cand, refs in corpus:
        hv = vec(cand)
        acc = 0.0
        for x in refs:
            rv = vec(x)
            pen = math.exp(-((len(cand) - len(x)) ** 2) / (2 * sigma ** 2))
            for n in range(4):
                dot = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
                nh = math.sqrt(sum(w * w for w in hv[n].values()))
                nr = math.sqrt(sum(w * w for w in rv[n].values()))
                if nh and nr:
                    dot /= nh * nr
                acc += dot * pen
        per.append(10 * acc / 4 / len(refs))
    return {"per_entry": per, "score": sum(per) / len(per)}


CORPORA = {
    "cat": [("the cat sat", ["the cat sat down"])],
    "mugs": [
        ("red ceramic mug large", ["red ceramic mug large", "large red mug"]),
        ("blue steel bottle", ["blue steel water bottle small"]),
        ("green wool scarf by lumo", ["lumo green wool scarf", "green scarf by lumo"]),
    ],
    "lamps": [
        ("tavi white linen lamp medium edition", ["tavi white linen lamp medium edition"]),
        ("tavi black linen lamp small edition", ["tavi white linen lamp small edition"]),
        ("oak desk lamp", ["morel oak desk lamp large edition", "oak lamp for desks"]),
        ("morel grey cotton lamp", ["morel grey cotton lamp large edition"]),
        ("a b c d", ["a c d e"]),
    ],
}

out = {}
for name, raw in CORPORA.items():
    corpus = [(tok(c), [tok(r) for r in refs]) for c, refs in raw]
    entry = {
        "entries": [{"candidate": c, "references": refs} for c, refs in raw],
        "bleu": bleu(corpus),
        "rouge_l": rouge(corpus),
    }
    if len(corpus) >= 2:
        entry["cider"] = cider(corpus)
    out[name] = entry
print(json.dumps(out, indent=2))
