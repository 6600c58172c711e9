"""
Filtering two-person clips from their metadata
==============================================

Every rule runs on every clip and the audit names each one that failed.
"""

import json
from pathlib import Path

from afca_lab.curation import CurationThresholds, check_sync_matrix, curate_lines, yield_summary

# Each speaker's audio must match their own face better than anyone else's.
for m in ([[7, 2], [3, 8]], [[2, 7], [8, 3]], [[7, 2], [3, 4]]):
    print(m, "->", check_sync_matrix(m, min_score=5))

fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
thresholds = CurationThresholds(**json.loads((fixtures / "curation_config.json").read_text())["thresholds"])
records = curate_lines((fixtures / "curation_corpus.ndjson").read_text().splitlines(), thresholds, seed=0)
for r in records:
    chunks = [round(c.duration_s, 2) for c in r.chunk_plan]
    print(f"{r.clip_id:20s} {r.verdict:17s} {', '.join(r.failed_rules) or r.error or chunks}")
print(json.dumps(yield_summary(records), indent=1))
