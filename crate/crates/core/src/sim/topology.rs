use std::fmt;
use std::net::Ipv4Addr;

use crate::packet::MacAddr;

pub type DeviceId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Sensor,
    Actor,
    Plc,
    Hmi,
    Cloud,
    Attacker,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Sensor => "sensor",
            Role::Actor => "actor",
            Role::Plc => "plc",
            Role::Hmi => "hmi",
            Role::Cloud => "cloud",
            Role::Attacker => "attacker",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Device {
    pub name: String,
    pub role: Role,
    pub ip: Ipv4Addr,
    pub mac: MacAddr,
    /// Set for edge nodes that run an engine and announce their status.
    pub node_id: Option<u16>,
}

impl Device {
    pub fn is_edge(&self) -> bool {
        self.node_id.is_some()
    }
}

/// One flat broadcast domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    devices: Vec<Device>,
}

fn lan_mac(last: u8) -> MacAddr {
    MacAddr::new(0x02, 0, 0, 0, 0, last)
}

impl Topology {
    /// Eight sensors, one actuator, the PLC, an HMI and the cloud/SCADA host.
    pub fn testbed() -> Self {
        let mut devices = Vec::new();
        for i in 1..=8u8 {
            let last = 100 + i;
            devices.push(Device {
                name: format!("S{i}"),
                role: Role::Sensor,
                ip: Ipv4Addr::new(192, 168, 1, last),
                mac: lan_mac(last),
                node_id: Some(u16::from(i)),
            });
        }
        devices.push(Device {
            name: "A1".into(),
            role: Role::Actor,
            ip: Ipv4Addr::new(192, 168, 1, 109),
            mac: lan_mac(109),
            node_id: Some(9),
        });
        for (name, role, last) in [("PLC", Role::Plc, 50), ("HMI", Role::Hmi, 40), ("Cloud", Role::Cloud, 1)] {
            devices.push(Device {
                name: name.into(),
                role,
                ip: Ipv4Addr::new(192, 168, 1, last),
                mac: lan_mac(last),
                node_id: None,
            });
        }
        Topology { devices }
    }

    pub fn from_devices(devices: Vec<Device>) -> Self {
        Topology { devices }
    }

    /// Adds an attacker host with the next free attacker address.
    pub fn add_attacker(&mut self) -> DeviceId {
        let n = self.devices.iter().filter(|d| d.role == Role::Attacker).count() as u8 + 1;
        self.devices.push(Device {
            name: format!("X{n}"),
            role: Role::Attacker,
            ip: Ipv4Addr::new(192, 168, 1, 200 + n),
            mac: MacAddr::new(0x02, 0, 0, 0, 0x0a, n),
            node_id: None,
        });
        self.devices.len() - 1
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, id: DeviceId) -> &Device {
        &self.devices[id]
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn by_name(&self, name: &str) -> Option<DeviceId> {
        self.devices.iter().position(|d| d.name.eq_ignore_ascii_case(name))
    }

    pub fn by_ip(&self, ip: Ipv4Addr) -> Option<DeviceId> {
        self.devices.iter().position(|d| d.ip == ip)
    }

    pub fn by_mac(&self, mac: MacAddr) -> Option<DeviceId> {
        self.devices.iter().position(|d| d.mac == mac)
    }

    pub fn first_with_role(&self, role: Role) -> Option<DeviceId> {
        self.devices.iter().position(|d| d.role == role)
    }

    pub fn edge_nodes(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_edge())
            .map(|(i, _)| i)
    }

    /// Sensors and actuators, in declaration order.
    pub fn field_devices(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.devices
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d.role, Role::Sensor | Role::Actor))
            .map(|(i, _)| i)
    }
}
