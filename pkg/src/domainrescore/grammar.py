"""Builds the default desk-scale template grammar.

Domains share carrier phrases ("find", "show me", "search for") so the
domain is only identifiable from the filler.  Filler inventories are
disjoint across domains, but a fraction of each domain's pseudo-words are
one character edit away from a word of another domain, which makes
first-pass substitution errors cross domain boundaries.
"""

from __future__ import annotations

import numpy as np

from .corpus import GeneratorConfig

SHARED_CARRIERS = [
    "find <X>",
    "search for <X>",
    "show me <X>",
    "look up <X>",
    "i am looking for <X>",
    "can you find <X>",
    "get me <X>",
    "what about <X>",
    "i need <X>",
    "tell me about <X>",
]

MUSIC_TEMPLATES = [
    "play <SongName>",
    "play <SongName> by <ArtistName>",
    "play the album <AlbumName>",
    "play <AlbumName> by <ArtistName>",
    "play some <ArtistName>",
    "put on <SongName>",
    "i want to hear <SongName> by <ArtistName>",
    "add <SongName> to my playlist",
    "find <SongName> by <ArtistName>",
]

NAV_TEMPLATES = [
    "navigate to <PlaceName>",
    "take me to <PlaceName> on <StreetName>",
    "directions to <StreetName>",
    "how far is <PlaceName>",
    "find <PlaceName> near <StreetName>",
    "get me to <PlaceName>",
    "drive to <StreetName>",
]

SHOP_TEMPLATES = [
    "buy <ItemName>",
    "order <ItemName>",
    "add <ItemName> to my cart",
    "reorder <ItemName>",
    "how much is <ItemName>",
    "add <ItemName> to my list",
]

OTHER_TEMPLATES = [
    "what is the weather in <City>",
    "turn on the <Appliance>",
    "turn off the <Appliance>",
    "set a timer for <Number> minutes",
    "set the <Appliance> to <Number> percent",
    "what time is it in <City>",
    "how far is <City>",
]

SLOT_FOR_CARRIER = {
    "Music": ["SongName", "ArtistName", "AlbumName"],
    "Navigation": ["PlaceName", "StreetName"],
    "Shopping": ["ItemName"],
    "Other": ["Topic"],
}

MUSIC_WORDS = (
    "love night heart fire dream rain summer blue gold river moon shadow light wild sweet lonely "
    "dance forever angel storm ocean highway echo starlight thunder velvet honey diamond broken "
    "midnight sunrise paradise whisper crimson silver electric neon fever rhythm melody"
).split()
PLACE_TYPES = "cafe diner park plaza mall station hotel library museum bakery pharmacy garage stadium".split()
STREET_TYPES = "street road avenue lane drive boulevard way court".split()
SHOP_NOUNS = (
    "towels batteries shampoo coffee detergent socks headphones charger blanket pillow vitamins "
    "toothpaste lotion candles sneakers backpack notebook markers tissues cereal snacks sponges "
    "filters bulbs cable"
).split()
SHOP_ATTRS = "paper organic wireless cotton large small extra soft fresh spare travel family".split()
APPLIANCES = "lights fan heater kettle television oven thermostat speaker lamp dishwasher".split()
NUMBERS = "one two three four five ten fifteen twenty thirty forty fifty sixty".split()
TOPICS = (
    "history science photosynthesis gravity volcanoes dinosaurs elections recipes football "
    "astronomy vaccines economics poetry chemistry"
).split()

_ONSETS = "b c d f g h j k l m n p r s t v w z br ch dr gr kr pl sh st tr".split()
_VOWELS = "a e i o u ai ea io".split()
_CODAS = ["", "", "", "n", "r", "l", "s", "m", "x", "t"]


def _pseudo_word(rng, syllables):
    parts = []
    for _ in range(syllables):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))])
    parts.append(_CODAS[rng.integers(len(_CODAS))])
    return "".join(parts)


def _mutate(rng, word):
    letters = "abcdefghiklmnoprstuvz"
    pos = rng.integers(len(word))
    return word[:pos] + letters[rng.integers(len(letters))] + word[pos + 1 :]


def _pseudo_inventories(rng, sizes, confusable_rate, taken):
    """Disjoint pseudo-word lists per domain with cross-domain near neighbours."""
    inv = {d: [] for d in sizes}
    order = [d for d in sizes for _ in range(sizes[d])]
    rng.shuffle(order)
    for d in order:
        word = None
        others = [w for o in inv if o != d for w in inv[o][-50:]]
        if others and rng.random() < confusable_rate:
            for _ in range(10):
                cand = _mutate(rng, others[rng.integers(len(others))])
                if cand not in taken:
                    word = cand
                    break
        while word is None:
            cand = _pseudo_word(rng, int(rng.integers(2, 4)))
            if len(cand) >= 4 and cand not in taken:
                word = cand
        taken.add(word)
        inv[d].append(word)
    return inv


def _phrases(rng, n, make):
    seen, out = set(), []
    while len(out) < n:
        p = make()
        if p not in seen:
            seen.add(p)
            out.append(p)
    return out


def default_generator_config(
    seed: int = 20240501,
    utterances_per_domain: int = 6250,
    zipf_exponent: float = 1.0,
    inventory_scale: float = 1.6,
    shared_rate: float = 0.3,
) -> GeneratorConfig:
    """Template grammar; ``shared_rate`` is the chance that a place, street or
    item name starts with a common word that also occurs in song titles."""
    rng = np.random.default_rng(seed)
    templates = {
        "Music": list(MUSIC_TEMPLATES),
        "Navigation": list(NAV_TEMPLATES),
        "Shopping": list(SHOP_TEMPLATES),
        "Other": list(OTHER_TEMPLATES),
    }
    for dom, slots in SLOT_FOR_CARRIER.items():
        for k, carrier in enumerate(SHARED_CARRIERS):
            templates[dom].append(carrier.replace("<X>", f"<{slots[k % len(slots)]}>"))

    taken = set()
    for t in sum(templates.values(), []):
        taken.update(w for w in t.split() if not w.startswith("<"))
    for lst in (MUSIC_WORDS, PLACE_TYPES, STREET_TYPES, SHOP_NOUNS, SHOP_ATTRS, APPLIANCES, NUMBERS, TOPICS):
        taken.update(lst)

    def sz(n):
        return max(4, int(round(n * inventory_scale)))

    inv = _pseudo_inventories(
        rng,
        {"music": sz(620), "place": sz(330), "street": sz(300), "shop": sz(420), "other": sz(260)},
        confusable_rate=0.35,
        taken=taken,
    )

    def pick(lst):
        return lst[rng.integers(len(lst))]

    music = inv["music"]
    fillers = {
        "SongName": _phrases(
            rng, sz(400), lambda: " ".join([pick(MUSIC_WORDS) if rng.random() < 0.5 else pick(music) for _ in range(int(rng.integers(1, 4)))])
        ),
        "ArtistName": _phrases(rng, sz(300), lambda: " ".join(pick(music) for _ in range(int(rng.integers(1, 3))))),
        "AlbumName": _phrases(rng, sz(200), lambda: pick(MUSIC_WORDS) + " " + pick(music)),
        "PlaceName": _phrases(
            rng,
            sz(350),
            lambda: (pick(MUSIC_WORDS) if rng.random() < shared_rate else pick(inv["place"]))
            + ("" if rng.random() < 0.3 else " " + pick(PLACE_TYPES)),
        ),
        "StreetName": _phrases(
            rng,
            sz(300),
            lambda: (pick(MUSIC_WORDS) if rng.random() < shared_rate else pick(inv["street"])) + " " + pick(STREET_TYPES),
        ),
        "ItemName": _phrases(
            rng,
            sz(450),
            lambda: " ".join(
                ([pick(MUSIC_WORDS) if rng.random() < shared_rate else pick(inv["shop"])] if rng.random() < 0.6 else [])
                + ([pick(SHOP_ATTRS)] if rng.random() < 0.5 else [])
                + [pick(SHOP_NOUNS) if rng.random() < 0.6 else pick(inv["shop"])]
            ),
        ),
        "Topic": _phrases(rng, sz(200), lambda: pick(TOPICS) if rng.random() < 0.3 else pick(inv["other"]) + " " + pick(TOPICS)),
        "City": _phrases(rng, sz(120), lambda: pick(inv["other"])),
        "Appliance": _phrases(rng, sz(60), lambda: (pick(inv["other"]) + " " if rng.random() < 0.5 else "") + pick(APPLIANCES)),
        "Number": list(NUMBERS),
    }
    return GeneratorConfig(
        seed=seed,
        templates=templates,
        fillers=fillers,
        utterances_per_domain=utterances_per_domain,
        zipf_exponent=zipf_exponent,
    )


def main(argv=None) -> int:
    import argparse
    import json

    p = argparse.ArgumentParser(description="write the default template grammar as JSON")
    p.add_argument("--seed", type=int, default=20240501)
    p.add_argument("--utterances-per-domain", type=int, default=6250)
    p.add_argument("--zipf-exponent", type=float, default=1.0)
    p.add_argument("--inventory-scale", type=float, default=1.6)
    p.add_argument("--shared-rate", type=float, default=0.3)
    p.add_argument("output")
    a = p.parse_args(argv)
    cfg = default_generator_config(a.seed, a.utterances_per_domain, a.zipf_exponent, a.inventory_scale, a.shared_rate)
    with open(a.output, "w", encoding="utf-8") as f:
        json.dump(cfg.to_json(), f, indent=1, sort_keys=True)
        f.write("\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
