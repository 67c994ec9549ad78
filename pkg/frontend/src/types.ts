// Snapshot documents as produced by the gateway (GET /api/state, WS /ws/stream).

export interface EgoDoc {
  speed: number;
  steering: number;
  acc_enabled: boolean;
  set_speed: number;
  commanded_speed: number;
}

export interface TrackDoc {
  id: number;
  x: number;
  y: number;
  vx: number;
  vy: number;
  length: number;
  width: number;
  class: 'Vehicle' | 'Obstacle';
  lifecycle: 'Tentative' | 'Confirmed';
  color: string;
}

export interface LatencyDoc {
  mean_ms: number;
  p95_ms: number;
  max_ms: number;
  violations: number;
}

export interface Snapshot {
  ts_us: number;
  ego: EgoDoc;
  emergency: boolean;
  tracks: TrackDoc[];
  path: [number, number][];
  latency: LatencyDoc;
  clock_offset_ms: number;
  collection_active: boolean;
}

export type CommandKind =
  | 'enable_acc'
  | 'disable_acc'
  | 'set_speed'
  | 'emergency_brake'
  | 'start_collection'
  | 'stop_collection'
  | 'generate_report';

export interface CommandResponse {
  accepted: boolean;
  error?: string;
}

export function isSnapshot(doc: unknown): doc is Snapshot {
  if (typeof doc !== 'object' || doc === null) return false;
  const d = doc as Record<string, unknown>;
  const ego = d.ego as Record<string, unknown> | undefined;
  return (
    typeof d.ts_us === 'number' &&
    ego !== undefined &&
    typeof ego.speed === 'number' &&
    typeof ego.steering === 'number' &&
    Array.isArray(d.tracks) &&
    Array.isArray(d.path) &&
    typeof d.latency === 'object' &&
    d.latency !== null
  );
}
