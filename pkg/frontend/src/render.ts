/** Deterministic HTML rendering of a UiState.
 *
 * Pure string in, string out: no DOM access, no clocks, no locales.
 * Everything displayed is sorted by stable keys, so two states that
 * mirror the same peer render to identical bytes regardless of the
 * order their maps were filled in.
 */

import { UiState, advertisedVenues, cmp } from "./state.js";
import type { Message, Note, VenueInfo } from "./types.js";

function esc(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;")
    .replace(/>/g, "&gt;").replace(/"/g, "&quot;");
}

function short(fp: string): string {
  return fp.slice(0, 12);
}

function nameFor(state: UiState, fp: string): string {
  if (fp === state.self.fingerprint) return state.self.display_name;
  return state.roster.get(fp)?.display_name ?? short(fp);
}

function rosterPane(state: UiState): string {
  const rows = [...state.roster.values()].sort(
    (a, b) => cmp(a.display_name, b.display_name) ||
      cmp(a.fingerprint, b.fingerprint));
  const lines = rows.map((r) =>
    `<li class="peer avail-${esc(r.availability)}" ` +
    `data-fp="${esc(r.fingerprint)}">` +
    `<b>${esc(r.display_name)}</b> ` +
    `<span class="avail">${esc(r.availability)}</span>` +
    (r.location ? ` <span class="loc">${esc(r.location)}</span>` : "") +
    (r.relay_notes ? ` <span class="badge">relay</span>` : "") +
    ` <code>${esc(short(r.fingerprint))}</code></li>`);
  return `<section id="roster"><h2>Peers</h2>` +
    `<p class="self">you: <b>${esc(state.self.display_name)}</b> ` +
    `<code>${esc(short(state.self.fingerprint))}</code></p>` +
    `<ul>${lines.join("")}</ul></section>`;
}

function chatLines(state: UiState, v: VenueInfo): string {
  const log: Message[] = state.messages.get(v.venue_id) ?? [];
  const rows = log.map((m) =>
    `<li class="msg"><b>${esc(nameFor(state, m.author))}</b>: ` +
    `${esc(m.body)}</li>`);
  for (const p of state.pendingChat) {
    if (p.venue_id === v.venue_id) {
      rows.push(`<li class="msg pending"><b>` +
        `${esc(state.self.display_name)}</b>: ${esc(p.body)}</li>`);
    }
  }
  return rows.join("");
}

function venuesPane(state: UiState): string {
  const joined = [...state.venues.values()].sort(
    (a, b) => cmp(a.name, b.name) || cmp(a.venue_id, b.venue_id));
  const blocks = joined.map((v) =>
    `<article class="venue" data-venue="${esc(v.venue_id)}">` +
    `<h3>${esc(v.name)} <span class="vis">${esc(v.visibility)}</span> ` +
    `<span class="members">${v.members.length} in</span></h3>` +
    `<ul class="chat">${chatLines(state, v)}</ul>` +
    `<form data-action="say" data-venue="${esc(v.venue_id)}">` +
    `<input name="body" placeholder="say something">` +
    `<button>send</button></form></article>`);
  const ads = advertisedVenues(state).map((v) =>
    `<li class="ad" data-venue="${esc(v.venue_id)}">` +
    `${esc(v.name)} <span class="vis">${esc(v.visibility)}</span> ` +
    `<button data-action="join" data-venue="${esc(v.venue_id)}">` +
    `join</button></li>`);
  return `<section id="venues"><h2>Venues</h2>${blocks.join("")}` +
    (ads.length ? `<h3>Advertised</h3><ul>${ads.join("")}</ul>` : "") +
    `</section>`;
}

function noteLine(state: UiState, n: Note, who: string): string {
  return `<li class="note${n.delivered ? " delivered" : ""}">` +
    `<b>${esc(nameFor(state, who))}</b>: ${esc(n.body)}` +
    (n.delivered ? ` <span class="badge">delivered</span>` : "") +
    `</li>`;
}

function notesPane(state: UiState): string {
  const inbox = state.notesInbox.map((n) => noteLine(state, n, n.author));
  const outbox = state.notesOutbox.map(
    (n) => noteLine(state, n, n.recipient));
  return `<section id="notes"><h2>Notes</h2>` +
    `<h3>Inbox</h3><ul>${inbox.join("")}</ul>` +
    `<h3>Sent</h3><ul>${outbox.join("")}</ul></section>`;
}

function sharesPane(state: UiState): string {
  const shares = [...state.shares.values()].sort(
    (a, b) => cmp(a.name, b.name) || cmp(a.entry_id, b.entry_id));
  const shareRows = shares.map((s) =>
    `<li class="share">${esc(s.name)} <span class="size">${s.size}</span>` +
    (s.tags.length ? ` <span class="tags">${esc(s.tags.join(","))}</span>`
      : "") +
    ` <code>${esc(s.entry_id.slice(0, 12))}</code></li>`);
  const qids = [...state.hits.keys()].sort(cmp);
  const hitBlocks = qids.map((qid) => {
    const rows = (state.hits.get(qid) ?? []).map((h) =>
      `<li class="hit" data-qid="${esc(qid)}" ` +
      `data-entry="${esc(h.entry_id)}">` +
      `${esc(h.name)} <span class="size">${h.size}</span> ` +
      `from <b>${esc(nameFor(state, h.owner))}</b> ` +
      `<button data-action="fetch" data-qid="${esc(qid)}" ` +
      `data-entry="${esc(h.entry_id)}">fetch</button></li>`);
    return `<div class="query" data-qid="${esc(qid)}">` +
      `<code>${esc(qid.slice(0, 8))}</code>` +
      `<ul>${rows.join("")}</ul></div>`;
  });
  return `<section id="shares"><h2>Shared files</h2>` +
    `<ul>${shareRows.join("")}</ul>` +
    `<form data-action="search"><input name="text" ` +
    `placeholder="search the group"><button>search</button></form>` +
    `<div id="hits">${hitBlocks.join("")}</div></section>`;
}

function transfersPane(state: UiState): string {
  const rows = [...state.transfers.values()].map((t) =>
    `<li class="job state-${esc(t.state)}">${esc(t.name)} ` +
    `<span class="progress">${t.bytes_done}/${t.size}</span> ` +
    `<span class="state">${esc(t.state)}</span>` +
    (t.state === "DONE" ? ` <span class="badge ok">verified</span>` : "") +
    (t.reason ? ` <span class="reason">${esc(t.reason)}</span>` : "") +
    `</li>`);
  return `<section id="transfers"><h2>Transfers</h2>` +
    `<ul>${rows.join("")}</ul></section>`;
}

export function render(state: UiState): string {
  return `<main>` + rosterPane(state) + venuesPane(state) +
    notesPane(state) + sharesPane(state) + transfersPane(state) +
    `</main>`;
}
