import sys, random
sys.path.insert(0, "src")
from orderindex.labeler import Labeler, LabelerConfig, FRONT

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
n = int(sys.argv[2]) if len(sys.argv) > 2 else 40000
pattern = sys.argv[3] if len(sys.argv) > 3 else "random"

lab = Labeler(LabelerConfig(a=8, k=4, capacity=1 << 17))
rng = random.Random(seed)
oracle = []

def firstbad():
    e = lab._first
    while e is not None and e.next is not None:
        if e.tag >= e.next.tag:
            return e
        e = e.next
    return None

K, L = lab.config.leaf_bits, lab.config.level_bits

def slices(t):
    out = [hex(t & ((1 << K) - 1))]
    for h in range(lab.config.height):
        out.append(hex((t >> (K + h * L)) & ((1 << L) - 1)))
    return out

def anc(el, h):
    node = el.leaf
    while node.height < h:
        node = node.parent
    return node

for i in range(n):
    if pattern == "random":
        j = rng.randrange(len(oracle) + 1)
    elif pattern == "append":
        j = len(oracle)
    elif pattern == "front":
        j = 0
    elif pattern == "hotspot":
        j = min(len(oracle), 17 + rng.randrange(5))
    else:
        j = rng.choice([0, len(oracle), rng.randrange(len(oracle) + 1)])
    nh = lab.insert_after(FRONT if j == 0 else oracle[j - 1])
    oracle.insert(j, nh)
    bad = firstbad() if (i % 37 == 0 or i > n - 3) else None
    if bad:
        e, f = bad, bad.next
        print("bad at insert", i, "new elem is f:", f is nh, "is e:", e is nh)
        se, sf = slices(e.tag), slices(f.tag)
        print("e slices (elem,s0..):", se)
        print("f slices (elem,s0..):", sf)
        hh = None
        for h in reversed(range(lab.config.height)):
            if se[h + 1] != sf[h + 1]:
                hh = h
                break
        if hh is None:
            print("differs only at elem slice")
            hh = 0
        print("top differing level slice:", hh)
        ae, af = anc(e, hh), anc(f, hh)
        print("e anc@h:", id(ae) % 100000, hex(ae.label), " f anc@h:", id(af) % 100000, hex(af.label), "same:", ae is af)
        pe, pf = ae.parent, af.parent
        print("parents same:", pe is pf)
        for nm, p in (("pe", pe), ("pf", pf)):
            pr = p.funded
            print(nm, id(p) % 100000, "polarity", p.polarity, "funded:",
                  pr and (pr.seq, "ph", pr.phase, "dir", pr.direction,
                          "blocked" if pr.blocked_on else "free",
                          "p1val", hex(pr.phase1_value),
                          "left" if p is pr.left else "right" if p is pr.right else "??",
                          "region", [hex(c.label) for c in (pr.region_nodes or [])]))
            if p.parent is not None:
                pr2 = p.parent.funded
                print(nm, "-parent funded:",
                      pr2 and (pr2.seq, "ph", pr2.phase, "dir", pr2.direction,
                               "blocked" if pr2.blocked_on else "free",
                               "region", [hex(c.label) for c in (pr2.region_nodes or [])]))
        print("children of pe:", [hex(c.label) for c in pe.children])
        if pf is not pe:
            print("children of pf:", [hex(c.label) for c in pf.children])
        print("stats:", {k: v for k, v in lab.stats.items() if v})
        sys.exit(1)
print("clean", n, pattern)
