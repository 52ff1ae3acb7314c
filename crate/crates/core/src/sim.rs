//! Wiring: policy + symbol map + scenario → an initialized machine and CPU.

use crate::cpu::{self, CpuState, RunResult};
use crate::error::Result;
use crate::gate;
use crate::machine::{Machine, MachineConfig};
use crate::policy::{
    parse_policy, parse_symbols, resolve, AccessMatrix, CompartmentPolicy, SymbolTable,
};
use crate::scenario::{self, Scenario};

#[derive(Debug, Clone)]
pub struct Simulation {
    pub machine: Machine,
    pub cpu: CpuState,
    pub scenario: Scenario,
    pub matrix: AccessMatrix,
}

impl Simulation {
    pub fn build(
        policies: &[CompartmentPolicy],
        symbols: &SymbolTable,
        scenario_text: &str,
        config: MachineConfig,
    ) -> Result<Self> {
        let scenario = scenario::parse_scenario(scenario_text, symbols)?;
        let matrix = resolve(policies, &scenario.symbols)?;
        let mut machine = Machine::new(config);
        gate::init_compartments(&mut machine, &matrix)?;
        let cpu = scenario::load(&mut machine, &scenario)?;
        Ok(Simulation {
            machine,
            cpu,
            scenario,
            matrix,
        })
    }

    pub fn from_texts(
        policy: &str,
        symbols: &str,
        scenario_text: &str,
        config: MachineConfig,
    ) -> Result<Self> {
        Self::build(
            &parse_policy(policy)?,
            &parse_symbols(symbols)?,
            scenario_text,
            config,
        )
    }

    /// Run with the scenario's own interrupt injections.
    pub fn run(&mut self, fuel: u64) -> Result<RunResult> {
        let injections = self.scenario.interrupts.clone();
        cpu::run(&mut self.machine, &mut self.cpu, fuel, &injections)
    }
}
