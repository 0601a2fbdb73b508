"""Synthetic catalog and vector builders shared across the suite."""

from __future__ import annotations

import numpy as np

from mreid.catalog import Annotation, Catalog, SpeciesPolicy

# one synthetic entry per dataset in the public multispecies corpus
SPECIES_INVENTORY = (
    "amur_tiger", "beluga_whale", "blue_whale", "bottlenose_dolphin",
    "brydes_whale", "capuchin", "cheetah", "chimpanzee", "chimpanzee_ctai",
    "chimpanzee_czoo", "commersons_dolphin", "cuviers_beaked_whale", "dog",
    "dusky_dolphin", "eurasianlynx", "fin_whale", "frasiers_dolphin",
    "giraffe", "horse_wild+face", "horse_wild_tunisian+face", "hyena",
    "hyperoodon_ampullatus", "jaguar", "japanese_monkey", "killer_whale",
    "leopard", "lion", "long_finned_pilot_whale", "lynx_pardinus",
    "macaque_face", "melon_headed_whale", "nyala",
    "pantropic_spotted_dolphin", "pygmy_killer_whale", "rhesus_monkey",
    "rough_toothed_dolphin", "seal", "sei_whale",
    "short_fin_pilot_whale+fin_dorsal", "short_finned_pilot_whale",
    "snow_leopard", "spinner_dolphin", "spotted_dolphin", "turtle_green",
    "turtle_green+head", "turtle_hawksbill", "turtle_hawksbill+head",
    "turtle_loggerhead_ext", "turtle_loggerhead_ext+head",
    "whale_fin+fin_dorsal", "whale_grey", "whale_humpback+fin_dorsal",
    "whale_humpback+fluke", "whale_orca", "whale_orca+fin_dorsal",
    "whale_sperm+fluke", "whaleshark", "white_shark+fin_dorsal",
    "white_sided_dolphin", "wilddog", "zebra_grevys",
)


def make_catalog(spec: dict[str, dict[str, int]], viewpoint: str = "left",
                 encounter_fn=None) -> Catalog:
    """spec: species -> {individual: annotation count}."""
    anns = []
    for species, individuals in spec.items():
        for individual, count in individuals.items():
            for j in range(count):
                ann_id = f"{species}-{individual}-{j:03d}"
                enc = encounter_fn(species, individual, j) if encounter_fn else ann_id
                anns.append(
                    Annotation(
                        annotation_id=ann_id,
                        species=species,
                        individual_id=individual,
                        viewpoint=viewpoint,
                        encounter_id=enc,
                    )
                )
    policies = {sp: SpeciesPolicy(species=sp) for sp in spec}
    return Catalog(annotations=tuple(anns), policies=policies)


def synthetic_mixed_catalog(n_species: int = 10, seed: int = 0,
                            min_size: int = 1, max_size: int = 40) -> Catalog:
    """Multi-species catalog with identity sizes spanning the filters."""
    rng = np.random.default_rng(seed)
    spec: dict[str, dict[str, int]] = {}
    for s in range(n_species):
        species = f"sp{s:02d}"
        n_idents = int(rng.integers(12, 35))
        spec[species] = {
            f"i{i:03d}": int(rng.integers(min_size, max_size + 1))
            for i in range(n_idents)
        }
    return make_catalog(spec)



def random_vectors(n: int, dim: int, seed: int, duplicate_frac: float = 0.0):
    """id -> vector dict; optionally duplicates rows to force exact ties."""
    rng = np.random.default_rng(seed)
    mat = rng.standard_normal((n, dim))
    n_dup = int(duplicate_frac * n)
    for _ in range(n_dup):
        mat[int(rng.integers(n))] = mat[int(rng.integers(n))]
    return {f"v{i:04d}": mat[i] for i in range(n)}
