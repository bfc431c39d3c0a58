// DOM rendering: strips as stacked <img> bands inside a horizontally
// scrollable canvas. Only the latest strip's node is ever retargeted; the
// rest keep their data URLs (byte-cached, matching the server contract).

import { UiSessionView } from './session.js';

export type UiElements = {
    canvas: HTMLElement;
    stepButton: HTMLButtonElement;
    rejectButton: HTMLButtonElement;
    banner: HTMLElement;
    hint: HTMLElement;
    progress: HTMLElement;
};

export function render(view: UiSessionView, els: UiElements): void {
    syncStrips(view, els.canvas);
    els.stepButton.disabled = view.sessionId === null || view.pending || view.done;
    els.rejectButton.disabled = view.sessionId === null || view.pending || view.strips.length === 0;
    els.banner.textContent = view.banner ?? '';
    els.banner.style.display = view.banner ? 'block' : 'none';
    els.hint.textContent = view.hint ?? (view.pending ? 'working…' : '');
    els.progress.textContent = view.sessionId
        ? `${view.strips.length} / ${view.targetLen}${view.done ? ' — done' : ''}`
        : 'no session';
}

function syncStrips(view: UiSessionView, canvas: HTMLElement): void {
    const want = view.targetLen;
    while (canvas.children.length > want) canvas.removeChild(canvas.lastChild as Node);
    while (canvas.children.length < want) {
        const img = document.createElement('img');
        img.className = 'band placeholder';
        img.alt = `band ${canvas.children.length}`;
        canvas.appendChild(img);
    }
    for (let i = 0; i < want; i++) {
        const img = canvas.children[i] as HTMLImageElement;
        if (i < view.strips.length) {
            const url = `data:image/png;base64,${view.strips[i]}`;
            if (img.src !== url) img.src = url;
            img.classList.remove('placeholder');
        } else if (!img.classList.contains('placeholder')) {
            img.removeAttribute('src');
            img.classList.add('placeholder');
        }
    }
}

// Long-canvas helper: keeps issuing steps while enabled, never overlapping
// (one in-flight request; pause simply stops issuing).
export class AutoStepper {
    private enabled = false;

    constructor(
        private stepFn: () => Promise<void>,
        private isDone: () => boolean,
        private delayMs = 30,
    ) {}

    get running(): boolean {
        return this.enabled;
    }

    start(): void {
        if (this.enabled) return;
        this.enabled = true;
        void this.loop();
    }

    pause(): void {
        this.enabled = false;
    }

    private async loop(): Promise<void> {
        while (this.enabled && !this.isDone()) {
            await this.stepFn();
            await new Promise((resolve) => setTimeout(resolve, this.delayMs));
        }
        this.enabled = false;
    }
}
