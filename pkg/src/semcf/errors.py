"""Exception types shared across the package."""


class DataError(Exception):
    """Malformed or inconsistent input data (bundles, traces, annotations, grids)."""


class NoCandidatesError(DataError):
    """The candidate set is empty after filtering; no edit can be selected."""
