//! Raw-socket probe transport for live measurement.
//!
//! Needs CAP_NET_RAW (in practice: root). Sockets open lazily, one per
//! (traffic class, source address), because the worker learns the
//! protocol only when a measurement starts. Sends bind to the requested
//! source so replies for anycast-sourced probes land wherever the
//! anycast address is announced; captures are timestamped on arrival in
//! userspace.
//!
//! Per class:
//! - ICMP goes out and comes back on one raw socket per source. The
//!   IPv4 checksum is precomputed by the codec; for ICMPv6 the kernel
//!   fills it in.
//! - TCP segments go out on a raw socket with the checksum finished
//!   here, where both pseudo-header addresses are known.
//! - DNS queries leave through ordinary UDP sockets bound to the
//!   worker's source port (no privilege needed to send), while replies
//!   are read from a raw UDP capture socket so that answers to *other*
//!   workers' anycast probes are seen too. The copies the send sockets
//!   receive are drained and dropped to keep their buffers clear.
//!
//! Raw sockets deliver every packet of their protocol, matched or not;
//! the codec's decode step is the filter, so noise only bumps the
//! unmatched counter.

use std::collections::BTreeMap;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr, UdpSocket};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};

use crate::probecodec::{internet_checksum, EncodedProbe};
use crate::domain::Protocol;

use super::{Capture, ProbeTransport, TransportError};

/// Offset of the checksum field in a TCP header.
const TCP_CHECKSUM_OFFSET: usize = 16;

/// Large enough for any probe reply plus an IPv4 header.
const RECV_BUF: usize = 4096;

/// What a raw socket carries. One socket per (class, source address).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SockClass {
    Icmp,
    Tcp,
    /// Receive-only: watches all inbound UDP for DNS answers.
    UdpCapture,
}

struct RawSock {
    fd: OwnedFd,
    class: SockClass,
    v4: bool,
}

pub struct RawNet {
    raw: BTreeMap<(SockClass, IpAddr), RawSock>,
    udp_send: BTreeMap<(IpAddr, u16), UdpSocket>,
}

impl RawNet {
    pub fn new() -> RawNet {
        RawNet { raw: BTreeMap::new(), udp_send: BTreeMap::new() }
    }

    /// Checks for raw-socket privilege without keeping anything open.
    /// Call before accepting work: failing at startup beats failing on
    /// the first probe of a run.
    pub fn probe_privilege() -> Result<(), TransportError> {
        match open_raw(libc::AF_INET, libc::IPPROTO_ICMP) {
            Ok(_) => Ok(()),
            Err(e) if privilege_denied(&e) => Err(TransportError::Refused(
                "raw sockets denied: probing needs CAP_NET_RAW (run as root or grant the \
                 capability)"
                    .into(),
            )),
            Err(e) => Err(TransportError::Io(e)),
        }
    }

    fn raw_sock(&mut self, class: SockClass, source: IpAddr) -> Result<&RawSock, TransportError> {
        if !self.raw.contains_key(&(class, source)) {
            let v4 = source.is_ipv4();
            let domain = if v4 { libc::AF_INET } else { libc::AF_INET6 };
            let proto = match (class, v4) {
                (SockClass::Icmp, true) => libc::IPPROTO_ICMP,
                (SockClass::Icmp, false) => libc::IPPROTO_ICMPV6,
                (SockClass::Tcp, _) => libc::IPPROTO_TCP,
                (SockClass::UdpCapture, _) => libc::IPPROTO_UDP,
            };
            let fd = match open_raw(domain, proto) {
                Ok(fd) => fd,
                Err(e) if privilege_denied(&e) => {
                    return Err(TransportError::Refused(
                        "raw sockets denied: probing needs CAP_NET_RAW".into(),
                    ))
                }
                Err(e) => return Err(TransportError::Io(e)),
            };
            // Binding scopes receives to packets addressed to `source`
            // and fixes the outgoing source address.
            bind_addr(fd.as_raw_fd(), source, 0)?;
            self.raw.insert((class, source), RawSock { fd, class, v4 });
        }
        Ok(&self.raw[&(class, source)])
    }

    fn udp_sender(&mut self, source: IpAddr, port: u16) -> Result<&UdpSocket, TransportError> {
        if !self.udp_send.contains_key(&(source, port)) {
            let sock = UdpSocket::bind(SocketAddr::new(source, port))?;
            sock.set_nonblocking(true)?;
            self.udp_send.insert((source, port), sock);
        }
        Ok(&self.udp_send[&(source, port)])
    }
}

impl Default for RawNet {
    fn default() -> Self {
        RawNet::new()
    }
}

impl ProbeTransport for RawNet {
    fn send(&mut self, probe: &EncodedProbe, source: IpAddr) -> Result<(), TransportError> {
        let target = probe.target.address();
        match probe.protocol {
            Protocol::Icmp => {
                let sock = self.raw_sock(SockClass::Icmp, source)?;
                send_raw(sock.fd.as_raw_fd(), &probe.wire_bytes, target)?;
            }
            Protocol::Tcp => {
                let mut seg = probe.wire_bytes.clone();
                patch_tcp_checksum(&mut seg, source, target);
                let sock = self.raw_sock(SockClass::Tcp, source)?;
                send_raw(sock.fd.as_raw_fd(), &seg, target)?;
            }
            Protocol::DnsA | Protocol::DnsChaos => {
                // Open the capture side first so a fast answer cannot
                // slip past before it exists.
                self.raw_sock(SockClass::UdpCapture, source)?;
                let sock = self.udp_sender(source, probe.flow_src_port)?;
                sock.send_to(&probe.wire_bytes, SocketAddr::new(target, probe.flow_dst_port))?;
            }
        }
        Ok(())
    }

    fn recv_ready(&mut self, now_us: u64) -> Vec<Capture> {
        let mut captures = Vec::new();
        let mut buf = [0u8; RECV_BUF];
        for sock in self.raw.values() {
            loop {
                let (len, src) = match recv_raw(sock.fd.as_raw_fd(), &mut buf) {
                    Ok(Some(got)) => got,
                    Ok(None) => break,
                    Err(_) => break,
                };
                let Some((payload, src)) = strip_headers(sock, &buf[..len], src) else {
                    continue;
                };
                captures.push(Capture { payload, src, rx_time_us: now_us });
            }
        }
        // The send sockets receive their own copies of the DNS answers;
        // the capture socket already has them, so these are discarded.
        for sock in self.udp_send.values() {
            while sock.recv_from(&mut buf).is_ok() {}
        }
        captures
    }
}

/// Cuts a received raw packet down to what the codec expects: the
/// protocol message itself. IPv4 raw sockets deliver the IP header,
/// IPv6 ones do not; UDP captures additionally shed the UDP header.
/// Returns the payload and the packet's true source address.
fn strip_headers(sock: &RawSock, packet: &[u8], from: IpAddr) -> Option<(Vec<u8>, IpAddr)> {
    let (body, src) = if sock.v4 {
        if packet.len() < 20 {
            return None;
        }
        let ihl = usize::from(packet[0] & 0x0f) * 4;
        if ihl < 20 || packet.len() < ihl {
            return None;
        }
        let src = Ipv4Addr::new(packet[12], packet[13], packet[14], packet[15]);
        (&packet[ihl..], IpAddr::V4(src))
    } else {
        (packet, from)
    };
    let body = match sock.class {
        SockClass::UdpCapture => body.get(8..)?,
        SockClass::Icmp | SockClass::Tcp => body,
    };
    Some((body.to_vec(), src))
}

/// Finishes the TCP checksum the codec left zeroed: RFC 793 over the
/// pseudo-header for the actual source and destination.
fn patch_tcp_checksum(segment: &mut [u8], source: IpAddr, target: IpAddr) {
    if segment.len() < TCP_CHECKSUM_OFFSET + 2 {
        return;
    }
    segment[TCP_CHECKSUM_OFFSET] = 0;
    segment[TCP_CHECKSUM_OFFSET + 1] = 0;
    let mut pseudo = Vec::with_capacity(40 + segment.len());
    match (source, target) {
        (IpAddr::V4(s), IpAddr::V4(t)) => {
            pseudo.extend_from_slice(&s.octets());
            pseudo.extend_from_slice(&t.octets());
            pseudo.push(0);
            pseudo.push(libc::IPPROTO_TCP as u8);
            pseudo.extend_from_slice(&(segment.len() as u16).to_be_bytes());
        }
        (IpAddr::V6(s), IpAddr::V6(t)) => {
            pseudo.extend_from_slice(&s.octets());
            pseudo.extend_from_slice(&t.octets());
            pseudo.extend_from_slice(&(segment.len() as u32).to_be_bytes());
            pseudo.extend_from_slice(&[0, 0, 0]);
            pseudo.push(libc::IPPROTO_TCP as u8);
        }
        // Mixed families never encode; leave the zero checksum.
        _ => return,
    }
    pseudo.extend_from_slice(segment);
    let ck = internet_checksum(&pseudo);
    segment[TCP_CHECKSUM_OFFSET..TCP_CHECKSUM_OFFSET + 2].copy_from_slice(&ck.to_be_bytes());
}

fn privilege_denied(e: &io::Error) -> bool {
    matches!(e.raw_os_error(), Some(libc::EPERM) | Some(libc::EACCES))
}

fn open_raw(domain: libc::c_int, proto: libc::c_int) -> io::Result<OwnedFd> {
    let fd = unsafe {
        libc::socket(domain, libc::SOCK_RAW | libc::SOCK_NONBLOCK | libc::SOCK_CLOEXEC, proto)
    };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

/// (storage, length) pair for bind/sendto. Raw sockets ignore the port.
fn sockaddr_for(addr: IpAddr, port: u16) -> (libc::sockaddr_storage, libc::socklen_t) {
    let mut storage: libc::sockaddr_storage = unsafe { std::mem::zeroed() };
    let len = match addr {
        IpAddr::V4(v4) => {
            let sin = libc::sockaddr_in {
                sin_family: libc::AF_INET as libc::sa_family_t,
                sin_port: port.to_be(),
                sin_addr: libc::in_addr { s_addr: u32::from(v4).to_be() },
                sin_zero: [0; 8],
            };
            unsafe {
                std::ptr::write(&mut storage as *mut _ as *mut libc::sockaddr_in, sin);
            }
            std::mem::size_of::<libc::sockaddr_in>()
        }
        IpAddr::V6(v6) => {
            let sin6 = libc::sockaddr_in6 {
                sin6_family: libc::AF_INET6 as libc::sa_family_t,
                sin6_port: port.to_be(),
                sin6_flowinfo: 0,
                sin6_addr: libc::in6_addr { s6_addr: v6.octets() },
                sin6_scope_id: 0,
            };
            unsafe {
                std::ptr::write(&mut storage as *mut _ as *mut libc::sockaddr_in6, sin6);
            }
            std::mem::size_of::<libc::sockaddr_in6>()
        }
    };
    (storage, len as libc::socklen_t)
}

fn bind_addr(fd: RawFd, addr: IpAddr, port: u16) -> io::Result<()> {
    let (storage, len) = sockaddr_for(addr, port);
    let rc = unsafe { libc::bind(fd, &storage as *const _ as *const libc::sockaddr, len) };
    if rc < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

fn send_raw(fd: RawFd, bytes: &[u8], target: IpAddr) -> io::Result<()> {
    let (storage, len) = sockaddr_for(target, 0);
    let rc = unsafe {
        libc::sendto(
            fd,
            bytes.as_ptr() as *const libc::c_void,
            bytes.len(),
            0,
            &storage as *const _ as *const libc::sockaddr,
            len,
        )
    };
    if rc < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// One datagram, or None when nothing is waiting.
fn recv_raw(fd: RawFd, buf: &mut [u8]) -> io::Result<Option<(usize, IpAddr)>> {
    let mut storage: libc::sockaddr_storage = unsafe { std::mem::zeroed() };
    let mut addrlen = std::mem::size_of::<libc::sockaddr_storage>() as libc::socklen_t;
    let rc = unsafe {
        libc::recvfrom(
            fd,
            buf.as_mut_ptr() as *mut libc::c_void,
            buf.len(),
            0,
            &mut storage as *mut _ as *mut libc::sockaddr,
            &mut addrlen,
        )
    };
    if rc < 0 {
        let e = io::Error::last_os_error();
        if e.kind() == io::ErrorKind::WouldBlock {
            return Ok(None);
        }
        return Err(e);
    }
    let src = match storage.ss_family as libc::c_int {
        libc::AF_INET => {
            let sin = unsafe { &*(&storage as *const _ as *const libc::sockaddr_in) };
            IpAddr::V4(Ipv4Addr::from(u32::from_be(sin.sin_addr.s_addr)))
        }
        libc::AF_INET6 => {
            let sin6 = unsafe { &*(&storage as *const _ as *const libc::sockaddr_in6) };
            IpAddr::V6(Ipv6Addr::from(sin6.sin6_addr.s6_addr))
        }
        _ => return Ok(None),
    };
    Ok(Some((rc as usize, src)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{IpVersion, MeasurementSpec, SourceMode, TargetAddress, WorkerId};

    fn spec(protocol: Protocol) -> MeasurementSpec {
        MeasurementSpec {
            measurement_id: 1,
            protocol,
            ip_version: IpVersion::V4,
            source_mode: SourceMode::Unicast,
            rate_pps: 100,
            worker_offset_ms: 0,
            workers: vec![WorkerId(3)],
            dns_probe_domain: Some("census.example".into()),
            tcp_dst_port: 62222,
        }
    }

    #[test]
    fn privilege_probe_gives_a_verdict_not_a_panic() {
        // Under root this opens and closes a socket; unprivileged it
        // must refuse with the capability hint rather than a raw errno.
        match RawNet::probe_privilege() {
            Ok(()) => {}
            Err(TransportError::Refused(msg)) => assert!(msg.contains("CAP_NET_RAW")),
            Err(TransportError::Io(e)) => panic!("unexpected io error: {e}"),
        }
    }

    #[test]
    fn tcp_checksum_verifies_over_pseudo_header() {
        let target = TargetAddress::of_address("192.0.2.9".parse().unwrap());
        let probe =
            crate::probecodec::encode_probe(&spec(Protocol::Tcp), target, WorkerId(3), 1, 777)
                .unwrap();
        let mut seg = probe.wire_bytes.clone();
        patch_tcp_checksum(&mut seg, "198.51.100.7".parse().unwrap(), target.address());

        let mut pseudo = Vec::new();
        pseudo.extend_from_slice(&[198, 51, 100, 7]);
        pseudo.extend_from_slice(&[192, 0, 2, 9]);
        pseudo.push(0);
        pseudo.push(6);
        pseudo.extend_from_slice(&(seg.len() as u16).to_be_bytes());
        pseudo.extend_from_slice(&seg);
        assert_eq!(internet_checksum(&pseudo), 0);
    }

    #[test]
    fn tcp_checksum_verifies_for_v6() {
        let mut spec6 = spec(Protocol::Tcp);
        spec6.ip_version = IpVersion::V6;
        let target = TargetAddress::of_address("2001:db8::9".parse().unwrap());
        let probe = crate::probecodec::encode_probe(&spec6, target, WorkerId(3), 1, 777).unwrap();
        let mut seg = probe.wire_bytes.clone();
        let source: IpAddr = "2001:db8:ffff::1".parse().unwrap();
        patch_tcp_checksum(&mut seg, source, target.address());

        let IpAddr::V6(s) = source else { unreachable!() };
        let IpAddr::V6(t) = target.address() else { unreachable!() };
        let mut pseudo = Vec::new();
        pseudo.extend_from_slice(&s.octets());
        pseudo.extend_from_slice(&t.octets());
        pseudo.extend_from_slice(&(seg.len() as u32).to_be_bytes());
        pseudo.extend_from_slice(&[0, 0, 0, 6]);
        pseudo.extend_from_slice(&seg);
        assert_eq!(internet_checksum(&pseudo), 0);
    }

    #[test]
    fn v4_header_stripping_finds_the_payload_and_source() {
        // A minimal IPv4 packet: 20-byte header, then an ICMP echo.
        let mut packet = vec![0u8; 20];
        packet[0] = 0x45;
        packet[12..16].copy_from_slice(&[203, 0, 113, 5]);
        packet.extend_from_slice(&[8, 0, 0, 0]);
        let sock = RawSock {
            fd: open_pipe_fd(),
            class: SockClass::Icmp,
            v4: true,
        };
        let (payload, src) =
            strip_headers(&sock, &packet, "10.0.0.1".parse().unwrap()).unwrap();
        assert_eq!(payload, vec![8, 0, 0, 0]);
        assert_eq!(src, "203.0.113.5".parse::<IpAddr>().unwrap());

        // Too short to carry a header: dropped, not sliced.
        assert!(strip_headers(&sock, &packet[..10], "10.0.0.1".parse().unwrap()).is_none());
    }

    #[test]
    fn udp_capture_sheds_the_udp_header_too() {
        let mut packet = vec![0u8; 20];
        packet[0] = 0x45;
        packet[12..16].copy_from_slice(&[203, 0, 113, 6]);
        packet.extend_from_slice(&[0xc0, 0x01, 0, 53, 0, 12, 0, 0]); // UDP header
        packet.extend_from_slice(&[0xab, 0xcd]); // DNS id
        let sock = RawSock {
            fd: open_pipe_fd(),
            class: SockClass::UdpCapture,
            v4: true,
        };
        let (payload, _) = strip_headers(&sock, &packet, "10.0.0.1".parse().unwrap()).unwrap();
        assert_eq!(payload, vec![0xab, 0xcd]);
    }

    /// Any fd will do for strip tests; a pipe end needs no privilege.
    fn open_pipe_fd() -> OwnedFd {
        let mut fds = [0; 2];
        assert_eq!(unsafe { libc::pipe(fds.as_mut_ptr()) }, 0);
        unsafe { libc::close(fds[1]) };
        unsafe { OwnedFd::from_raw_fd(fds[0]) }
    }
}
