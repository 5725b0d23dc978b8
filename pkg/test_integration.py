#!/usr/bin/env python3
"""
Integration Test for GP-SEM Actuator Identification
Runs the complete pipeline from simulation to evaluation on a short scenario
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from pipeline import ActuatorPipeline  # noqa: E402
from scenario import RunConfig, ScenarioConfig  # noqa: E402

SHORT_SCENARIO = {
    "name": "integration",
    "exploration": {"waypoints": [0.0, 0.8, -0.8, 0.0], "duration": 5.0},
    "perturbations": [{"start": 1.0, "end": 1.8, "kind": "constant", "magnitude": 0.9}],
    "identification": {"modes": 2, "iterations": 3},
    "evaluation": {"equilibrium_stiffness": [2.0, 3.5, 10.0], "compensate_duration": 2.0},
}


def test_complete_pipeline():
    """Simulate → identify → classify → compensate → evaluate"""
    print("🚀 Testing Complete Actuator Identification Pipeline\n")

    with tempfile.TemporaryDirectory() as out:
        scenario = ScenarioConfig.from_dict(SHORT_SCENARIO).validate()
        pipeline = ActuatorPipeline(scenario, RunConfig.resolve(scenario, {"seed": 3, "output_dir": out}),
                                    write_figures=False)

        # Test 1: Simulation
        print("🎛️ Test 1: Simulated exploration...")
        simulated = pipeline.simulate()
        assert simulated["success"], simulated.get("error")
        dataset_path = simulated["dataset_path"]
        print(f"✅ Simulated {simulated['summary']['samples']} samples "
              f"({simulated['summary']['truth_counts']})")

        # Test 2: Identification
        print("\n🧠 Test 2: Stochastic EM identification...")
        identified = pipeline.identify(dataset_path)
        assert identified["success"], identified.get("error")
        bundle_path = identified["bundle_path"]
        print(f"✅ Mode sizes {identified['summary']['mode_sizes']}, "
              f"Σ_d={identified['summary']['disturbance_cov']:.4g}")

        # Test 3: Classification
        print("\n🔍 Test 3: Mode posteriors...")
        classified = pipeline.classify(bundle_path, dataset_path)
        assert classified["success"], classified.get("error")
        assert classified["posteriors"].shape == (simulated["summary"]["samples"], 2)
        print(f"✅ Accuracy on the training set: {classified['summary']['accuracy']:.1%}")

        # Test 4: Compensation
        print("\n🦾 Test 4: Closed-loop compensation...")
        compensated = pipeline.compensate(bundle_path)
        assert compensated["success"], compensated.get("error")
        assert compensated["summary"]["compensated"]
        print(f"✅ Energy audit violation: {compensated['summary']['violation']}")

        # Test 5: Evaluation
        print("\n📊 Test 5: Evaluation...")
        for which in ("equilibrium", "classification"):
            evaluated = pipeline.evaluate(which, bundle_path, dataset_path)
            assert evaluated["success"], evaluated.get("error")
            print(f"✅ {which} evaluation written")
        assert os.path.exists(os.path.join(out, "equilibrium.csv"))

        # Test 6: Pipeline Stats
        print("\n📈 Test 6: Pipeline statistics...")
        stats = pipeline.get_stats()
        assert stats["disturbance_mode"]
        assert stats["files_written"] > 0
        print(f"✅ Config hash: {stats['config_hash'][:12]}")
        print(f"✅ Files written: {stats['files_written']}")

    print("\n🎉 ALL TESTS PASSED!")


if __name__ == "__main__":
    try:
        test_complete_pipeline()
    except Exception as e:
        print(f"❌ Test failed: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
    sys.exit(0)
