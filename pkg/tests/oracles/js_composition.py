"""JS divergence of (0.8, 0.2) against (0.5, 0.5), composed from KL terms at 50 digits."""

import mpmath as mp

mp.mp.dps = 50


def kl(p, q):
    return sum(pi * mp.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def js(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return kl(p, m) / 2 + kl(q, m) / 2


if __name__ == "__main__":
    p = [mp.mpf("0.8"), mp.mpf("0.2")]
    q = [mp.mpf("0.5"), mp.mpf("0.5")]
    print(mp.nstr(js(p, q), 20))
