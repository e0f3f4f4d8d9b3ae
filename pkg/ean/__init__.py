"""Event adaptive network for video action recognition: numpy tensor engine, EAB / SOI-Tr / LMC modules,
analytic cost profiler and a toy experiment harness."""
version_info = (0, 2, 0)
version = '.'.join(str(c) for c in version_info)
