"""Benchmark filtering against services reached over HTTP.

Starts the stub model and editor on loopback ports, writes a small synthetic
sample file, and runs the causal filter through the real HTTP clients.  Half
of the samples ask about a region the stub model never looks at, so they land
in the ungrounded group.

    python3 demos/bench_over_http.py
"""

import json
import tempfile
from pathlib import Path

from medfocus.benchbuild import build_bench
from medfocus.core import BBox, VqaSample, save_image, write_samples
from medfocus.services import EditorClient, ModelClient
from medfocus.testkit import LoopbackServer, MockModelService, StubEditorService, synth_sample


def main(n: int = 8):
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        rows, specs = [], {}
        for seed in range(n):
            s = synth_sample(seed, image_path=f"{seed}.pgm")
            save_image(s.image, tmp / f"{seed}.pgm")
            sample = s.sample
            if seed % 2:
                # annotate a corner patch instead of the finding
                d = sample.to_dict()
                d["gt_boxes"] = [BBox(0, 0, 24, 24).as_list()]
                sample = VqaSample.from_dict(d)
            rows.append(sample)
            specs[sample.sample_id] = s.spec
        write_samples(rows, tmp / "samples.jsonl")

        servers = [LoopbackServer(MockModelService(spec).handlers()) for spec in specs.values()]
        urls = dict(zip(specs, (srv.__enter__() for srv in servers)))
        try:
            with LoopbackServer(StubEditorService().handlers()) as editor_url:
                stats = build_bench(tmp / "samples.jsonl", None, EditorClient(editor_url), tmp / "bench.jsonl",
                                    model_factory=lambda sample, img: ModelClient(urls[sample.sample_id]))
        finally:
            for srv in servers:
                srv.__exit__(None, None, None)

        for v in stats["verdicts"]:
            print(f"{v['sample_id']:<12} {v['group']:<20} {json.dumps(v['stage_trace'])}")
        print()
        print("counts:", stats["counts"])
        print("retained:", stats["retained"])


if __name__ == "__main__":
    main()
