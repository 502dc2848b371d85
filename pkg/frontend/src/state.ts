/** Client-side mirror of one peer's state.
 *
 * The daemon appends every state change to a sequenced event log
 * before the change becomes readable, so a client can either ingest a
 * full snapshot or fold the event stream and land on the same state.
 * Rendering sorts everything it shows, which makes the two routes
 * converge byte for byte; replaying a captured event log through a
 * fresh state must reproduce the live rendering exactly.
 */

import type {
  ApiEvent, Hit, Message, Note, NoteEvent, RosterEntry, SelfInfo,
  Share, Snapshot, Transfer, VenueInfo,
} from "./types.js";

export interface PendingChat {
  venue_id: string;
  body: string;
}

export interface UiState {
  seq: number;
  self: SelfInfo;
  roster: Map<string, RosterEntry>;      // other peers, by fingerprint
  venues: Map<string, VenueInfo>;        // joined venues only
  messages: Map<string, Message[]>;      // per joined venue, in order
  notesInbox: Note[];
  notesOutbox: Note[];
  shares: Map<string, Share>;
  hits: Map<string, Hit[]>;              // queries with at least one hit
  transfers: Map<string, Transfer>;      // insertion order = creation
  pendingChat: PendingChat[];            // posted, not yet delivered
}

/** Code-unit string compare; locale-independent, matches the server. */
export function cmp(a: string, b: string): number {
  return a < b ? -1 : a > b ? 1 : 0;
}

export function emptyState(self: SelfInfo): UiState {
  return {
    seq: 0,
    self,
    roster: new Map(),
    venues: new Map(),
    messages: new Map(),
    notesInbox: [],
    notesOutbox: [],
    shares: new Map(),
    hits: new Map(),
    transfers: new Map(),
    pendingChat: [],
  };
}

/** Replace mirrored state with a full snapshot; keeps pending marks. */
export function ingestSnapshot(state: UiState, snap: Snapshot): UiState {
  state.seq = snap.seq;
  state.self = snap.self;
  state.roster.clear();
  for (const row of snap.roster) {
    if (row.fingerprint !== snap.self.fingerprint) {
      state.roster.set(row.fingerprint, row);
    }
  }
  state.venues.clear();
  state.messages.clear();
  for (const v of snap.venues) {
    // advertised-but-unjoined venues are re-derived from roster ads
    if (v.joined) {
      state.venues.set(v.venue_id, v);
      state.messages.set(v.venue_id,
                         (snap.messages[v.venue_id] ?? []).slice());
    }
  }
  state.notesInbox = snap.notes.filter((n) => n.role === "inbox");
  state.notesOutbox = snap.notes.filter((n) => n.role === "author");
  state.shares.clear();
  for (const s of snap.shares) state.shares.set(s.entry_id, s);
  state.hits.clear();
  for (const [qid, hits] of Object.entries(snap.hits)) {
    if (hits.length > 0) state.hits.set(qid, hits.slice());
  }
  state.transfers.clear();
  for (const t of snap.transfers) state.transfers.set(t.job_id, t);
  return state;
}

function upsertNote(bucket: Note[], rec: Note): void {
  const i = bucket.findIndex((n) => n.note_id === rec.note_id);
  if (i >= 0) bucket[i] = rec;
  else bucket.push(rec);
}

function settlePending(state: UiState, msg: Message): void {
  if (msg.author !== state.self.fingerprint) return;
  const i = state.pendingChat.findIndex(
    (p) => p.venue_id === msg.venue_id && p.body === msg.body);
  if (i >= 0) state.pendingChat.splice(i, 1);
}

export function applyEvent(state: UiState, ev: ApiEvent): UiState {
  const p = ev.payload;
  switch (ev.kind) {
    case "roster": {
      const row = p as unknown as RosterEntry;
      if (row.fingerprint !== state.self.fingerprint) {
        state.roster.set(row.fingerprint, row);
      }
      break;
    }
    case "venue": {
      const v = p as unknown as VenueInfo;
      if (v.left) {
        state.venues.delete(v.venue_id);
        state.messages.delete(v.venue_id);
      } else if (v.joined) {
        state.venues.set(v.venue_id, v);
        if (!state.messages.has(v.venue_id)) {
          state.messages.set(v.venue_id, []);
        }
      }
      break;
    }
    case "message": {
      const m = p as unknown as Message;
      let log = state.messages.get(m.venue_id);
      if (log === undefined) {
        log = [];
        state.messages.set(m.venue_id, log);
      }
      log.push(m);
      settlePending(state, m);
      break;
    }
    case "note": {
      const n = p as unknown as NoteEvent;
      if (n.evicted || n.role === "relay") break;
      if (n.role === "inbox") {
        upsertNote(state.notesInbox, n as unknown as Note);
      } else if (n.role === "author") {
        upsertNote(state.notesOutbox, n as unknown as Note);
      }
      else if (n.delivered) {
        for (const bucket of [state.notesInbox, state.notesOutbox]) {
          for (const rec of bucket) {
            if (rec.note_id === n.note_id) rec.delivered = true;
          }
        }
      }
      break;
    }
    case "share": {
      const s = p as unknown as Share;
      if (s.removed) state.shares.delete(s.entry_id);
      else state.shares.set(s.entry_id, s);
      break;
    }
    case "hit": {
      const qid = p["query_id"];
      const hit = p["hit"];
      if (typeof qid !== "string" || typeof hit !== "object" || !hit) break;
      let list = state.hits.get(qid);
      if (list === undefined) {
        list = [];
        state.hits.set(qid, list);
      }
      list.push(hit as Hit);
      break;
    }
    case "transfer": {
      const t = p as unknown as Transfer;
      state.transfers.set(t.job_id, t);   // set() keeps first position
      break;
    }
    default:
      break;                              // unknown kinds are additive
  }
  state.seq = ev.seq;
  return state;
}

export function applyAll(state: UiState, events: ApiEvent[]): UiState {
  for (const ev of events) applyEvent(state, ev);
  return state;
}

/** Venues advertised by peers in the roster that we have not joined. */
export function advertisedVenues(state: UiState): VenueInfo[] {
  const seen = new Map<string, VenueInfo>();
  for (const row of state.roster.values()) {
    for (const ad of row.venues) {
      if (!state.venues.has(ad.venue_id) && !seen.has(ad.venue_id)) {
        seen.set(ad.venue_id, {
          venue_id: ad.venue_id,
          name: ad.name,
          visibility: ad.visibility,
          creator: null,
          created: null,
          invited: [],
          members: [],
          joined: false,
        });
      }
    }
  }
  return [...seen.values()].sort(
    (a, b) => cmp(a.name, b.name) || cmp(a.venue_id, b.venue_id));
}
