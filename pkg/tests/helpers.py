from __future__ import annotations

from plcbench.net import SimChannel
from plcbench.plcsim import Simulated, create_emulator, standard_scan, standard_variables


class SimBed:
    """Reference fixture on a simulated network: d = 1 ms, T = 1 ms unless overridden."""

    def __init__(self, delay_us: int = 1000, task_period_us: int = 1000, **channel_kw) -> None:
        self.channel = SimChannel(one_way_delay_us=delay_us, **channel_kw)
        self.rt = self.channel.runtime
        self.plc = create_emulator(standard_variables(), standard_scan(task_period_us), Simulated(self.channel))
