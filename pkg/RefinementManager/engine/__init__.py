"""Decision-model refinement engine.

Modules are imported as `engine.<name>` once the RefinementManager/ folder is
on sys.path (run_evr.py and tests/conftest.py take care of that).
"""
