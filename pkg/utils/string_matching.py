from Levenshtein import distance as lev_distance


def get_levenshtein_distance(s1: str, s2: str) -> int:
    """Edit distance between two names, case-insensitive."""
    return lev_distance(s1.strip().lower(), s2.strip().lower())


def names_are_similar(s1: str, s2: str, max_distance: int = 2) -> bool:
    """
    Checks if two names are close enough to suggest one for the other,
    e.g. "tan" for "tanh" or "example-62" for "example62".
    """
    s1_clean = s1.strip().lower()
    s2_clean = s2.strip().lower()
    if not s1_clean or not s2_clean:
        return False
    return get_levenshtein_distance(s1_clean, s2_clean) <= max_distance


def closest_name(name: str, candidates: list[str], max_distance: int = 2) -> str | None:
    """
    Returns the candidate nearest to `name`, or None when nothing is
    within `max_distance` edits. Ties go to the earlier candidate.
    """
    best = None
    best_distance = max_distance + 1
    for candidate in candidates:
        if not names_are_similar(name, candidate, max_distance):
            continue
        d = get_levenshtein_distance(name, candidate)
        if d < best_distance:
            best, best_distance = candidate, d
    return best
