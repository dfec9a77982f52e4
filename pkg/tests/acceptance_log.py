"""Per-criterion outcomes, filled by test_acceptance and printed by conftest."""

RESULTS = {}
