/** JSON shapes served by the peer's control API. */

export interface SelfInfo {
  fingerprint: string;
  subject: string;
  display_name: string;
}

export interface VenueAd {
  venue_id: string;
  name: string;
  visibility: string;
}

export interface RosterEntry {
  fingerprint: string;
  display_name: string;
  location: string;
  availability: string;
  venues: VenueAd[];
  last_seen: number;
  relay_notes: boolean;
}

export interface VenueInfo {
  venue_id: string;
  name: string;
  visibility: string;
  creator: string | null;
  created: number | null;
  invited: string[];
  members: string[];
  joined: boolean;
  left?: boolean;
}

export interface Message {
  venue_id: string;
  author: string;
  body: string;
  position: [number, number, string];
}

export interface Note {
  note_id: string;
  author: string;
  recipient: string;
  body: string;
  created: number;
  role: string;
  delivered: boolean;
}

/** Partial note updates ride the same event kind. */
export interface NoteEvent {
  note_id: string;
  role?: string;
  delivered?: boolean;
  evicted?: boolean;
  [key: string]: unknown;
}

export interface Share {
  entry_id: string;
  name: string;
  size: number;
  tags: string[];
  removed?: boolean;
  stale?: boolean;
}

export interface Hit {
  entry_id: string;
  name: string;
  size: number;
  tags: string[];
  owner: string;
  addr: { node: string; port: number };
}

export interface Transfer {
  job_id: string;
  entry_id: string;
  name: string;
  size: number;
  owner: string;
  state: string;
  reason: string;
  bytes_done: number;
  bytes_received: number;
  attempts: number;
  dest: string | null;
}

export interface Snapshot {
  seq: number;
  self: SelfInfo;
  roster: RosterEntry[];
  venues: VenueInfo[];
  messages: Record<string, Message[]>;
  notes: Note[];
  shares: Share[];
  hits: Record<string, Hit[]>;
  transfers: Transfer[];
}

export interface ApiEvent {
  seq: number;
  kind: string;
  payload: Record<string, unknown>;
}

export interface EventsReply {
  events: ApiEvent[];
  gap: boolean;
  next: number;
}
