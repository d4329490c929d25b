//! MQTT client for RFID readers.
//!
//! Subscribes to `dada/reader/+/state` and publishes LED feedback to
//! `dada/reader/<id>/led` and activation changes to `dada/control/changes`.

use std::time::Duration;

use dada_core::control::{encode_change, encode_led, BusMessage, LedFeedback};
use rumqttc::{AsyncClient, Event, MqttOptions, Packet, QoS};
use tokio::sync::{broadcast, watch};

use crate::api::{lock, SharedGateway};
use crate::gateway::{GatewayEvent, Sequenced};

pub const READER_STATE_FILTER: &str = "dada/reader/+/state";

fn outbound(event: &GatewayEvent) -> Option<BusMessage> {
    match event {
        GatewayEvent::ActivationChange(c) => Some(encode_change(c)),
        GatewayEvent::Led { reader_id, on } => Some(encode_led(reader_id, LedFeedback { on: *on })),
        GatewayEvent::Anomaly(_) => None,
    }
}

/// Runs the bus client until `shutdown` flips. Connection errors are logged
/// and retried.
pub async fn run(gateway: SharedGateway, host: String, port: u16, mut shutdown: watch::Receiver<bool>) {
    let mut opts = MqttOptions::new("dada-gateway", host, port);
    opts.set_keep_alive(Duration::from_secs(30));
    let (client, mut eventloop) = AsyncClient::new(opts, 64);

    let mut events = lock(&gateway).subscribe(None).live;
    let publisher = client.clone();
    let mut publisher_shutdown = shutdown.clone();
    let out_task = tokio::spawn(async move {
        loop {
            let ev: Sequenced = tokio::select! {
                r = events.recv() => match r {
                    Ok(ev) => ev,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::warn!(missed = n, "bus publisher lagged");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => return,
                },
                _ = publisher_shutdown.changed() => return,
            };
            if let Some(msg) = outbound(&ev.event) {
                if let Err(e) = publisher.publish(msg.topic, QoS::AtLeastOnce, false, msg.payload).await {
                    tracing::warn!("bus publish failed: {e}");
                }
            }
        }
    });

    loop {
        let polled = tokio::select! {
            r = eventloop.poll() => r,
            _ = shutdown.changed() => break,
        };
        match polled {
            Ok(Event::Incoming(Packet::ConnAck(_))) => {
                tracing::info!("bus connected");
                if let Err(e) = client.subscribe(READER_STATE_FILTER, QoS::AtLeastOnce).await {
                    tracing::warn!("bus subscribe failed: {e}");
                }
            }
            Ok(Event::Incoming(Packet::Publish(p))) => {
                let msg = BusMessage {
                    topic: p.topic.clone(),
                    payload: p.payload.to_vec(),
                };
                if let Err(e) = lock(&gateway).handle_bus_message(&msg) {
                    tracing::warn!(topic = p.topic, "rejected reader message: {e}");
                }
            }
            Ok(_) => {}
            Err(e) => {
                tracing::warn!("bus connection error: {e}");
                tokio::select! {
                    _ = tokio::time::sleep(Duration::from_secs(1)) => {}
                    _ = shutdown.changed() => break,
                }
            }
        }
    }
    let _ = client.disconnect().await;
    out_task.abort();
}
